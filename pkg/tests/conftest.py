import os

# Pin BLAS threading before numpy loads anywhere; keeps timings stable and
# training runs bit-reproducible across processes.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def record_criterion(key: str, status: str, detail: str = "") -> None:
    """Register a criterion outcome ('PASS', 'FAIL', or 'SKIP') for the
    end-of-run summary."""
    _ACCEPTANCE[key] = (status, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: (len(k), k)):
        status, detail = _ACCEPTANCE[key]
        line = f"criterion {key}: {status}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
