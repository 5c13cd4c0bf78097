"""Command-line client for the optimization service.

Every command builds a request, sends it to the HTTP API, and writes the
returned artifacts to user-given paths.  By default the service application
runs in-process (no server needed); pass ``--server URL`` to talk to a
remote instance instead.  Diagnostics go to stderr, the single-line JSON
summary goes to stdout, and the exit code is 0 on success, 1 when the
solver did not converge (or a check failed), and 2 for input or usage
errors.
"""

from __future__ import annotations

import argparse
import json
import sys

import httpx

from . import learned as ln

_EXIT_OK = 0
_EXIT_NOT_CONVERGED = 1
_EXIT_USAGE = 2


def _err(message: str) -> None:
    print(f"neuropt: {message}", file=sys.stderr)


def _f17(x: float) -> str:
    return format(float(x), ".17g")


def _summary_line(fields: list[tuple[str, object]]) -> str:
    parts = []
    for key, value in fields:
        if isinstance(value, bool):
            parts.append(f'"{key}":{"true" if value else "false"}')
        elif isinstance(value, float):
            parts.append(f'"{key}":{_f17(value)}')
        elif isinstance(value, int):
            parts.append(f'"{key}":{value}')
        else:
            parts.append(f'"{key}":{json.dumps(value)}')
    return "{" + ",".join(parts) + "}"


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: line {exc.lineno}: {exc.msg}") from None


def _write_text(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from None


class CliError(Exception):
    pass


def _post(args, path: str, payload: dict) -> dict:
    if args.server:
        client = httpx.Client(base_url=args.server.rstrip("/"), timeout=None)
    else:
        # In-process transport against the bundled application.
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            from fastapi.testclient import TestClient

        from .service.app import app

        client = TestClient(app)
    try:
        resp = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        raise CliError(f"request failed: {exc}") from None
    finally:
        client.close()
    if resp.status_code == 409:
        # Staged solve aborted; report like a non-converged solve.
        _err(resp.json().get("detail", "staged solve aborted"))
        raise SolveAborted()
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise CliError(f"service rejected the request ({resp.status_code}): {detail}")
    return resp.json()


class SolveAborted(Exception):
    pass


def _status_exit(status: str) -> int:
    return _EXIT_OK if status == "converged" else _EXIT_NOT_CONVERGED


def emit_solution_summary(summary: dict) -> str:
    """Single-line JSON solution summary with 17-significant-digit reals."""
    return _summary_line([
        ("status", summary["status"]),
        ("iterations", int(summary["iterations"])),
        ("objective", float(summary["objective"])),
        ("kkt_error", float(summary["kkt_error"])),
    ])


# --- command handlers ----------------------------------------------------------

def _fit_request(args, scenario: dict) -> dict:
    payload = {
        "scenario": scenario,
        "samples": args.samples,
        "seed": args.seed,
        "hidden": [int(h) for h in args.hidden.split(",") if h.strip()],
    }
    if args.epochs is not None:
        payload["epochs"] = args.epochs
    if args.lr is not None:
        payload["learning_rate"] = args.lr
    if args.batch_size is not None:
        payload["batch_size"] = args.batch_size
    return payload


def _cmd_fit(args, endpoint: str) -> int:
    scenario = _load_json(args.scenario)
    resp = _post(args, endpoint, _fit_request(args, scenario))
    spec = ln.mlp_from_dict(resp["mlp"])
    ln.save_mlp(spec, args.out)
    _err(f"wrote model weights to {args.out}")
    print(_summary_line([
        ("train_mse", float(resp["train_mse"])),
        ("holdout_mse", float(resp["holdout_mse"])),
        ("output_variance", float(resp["output_variance"])),
    ]))
    return _EXIT_OK


def _cmd_solve_fish(args) -> int:
    scenario = _load_json(args.scenario)
    payload = {
        "scenario": scenario,
        "tol": args.tol,
        "max_iter": args.max_iter,
    }
    if not args.analytic:
        payload["flow"] = _load_json(args.flow)
    resp = _post(args, "/solve/fish", payload)
    _write_text(args.out, resp["csv"])
    _err(
        f"wrote trajectory to {args.out} "
        f"(dynamics residual {resp['dynamics_residual_max']:.3e}, "
        f"obstacle margin {resp['obstacle_margin_min']:.3e})"
    )
    print(emit_solution_summary(resp["summary"]))
    return _status_exit(resp["summary"]["status"])


def _cmd_solve_traj(args) -> int:
    scenario = _load_json(args.scenario)
    payload = {
        "scenario": scenario,
        "mu_phase2": args.mu_phase2,
        "tol": args.tol,
        "max_iter": args.max_iter,
    }
    if not args.analytic:
        payload["density"] = _load_json(args.density)
    resp = _post(args, "/solve/traj", payload)
    _write_text(args.out, resp["csv"])
    _err(
        f"wrote trajectory to {args.out} "
        f"(phase 1: {resp['phase1']['iterations']} iterations, "
        f"max sampled density {resp['max_density']:.6f})"
    )
    print(emit_solution_summary(resp["phase2"]))
    return _status_exit(resp["phase2"]["status"])


def _cmd_check_grad(args) -> int:
    payload = {
        "mlp": _load_json(args.mlp),
        "trials": args.trials,
        "seed": args.seed,
        "tolerance": args.tolerance,
    }
    resp = _post(args, "/check-grad", payload)
    print(_summary_line([
        ("passed", bool(resp["passed"])),
        ("max_rel_error", float(resp["max_rel_error"])),
        ("trials", int(resp["trials"])),
    ]))
    return _EXIT_OK if resp["passed"] else _EXIT_NOT_CONVERGED


def _cmd_codegen(args) -> int:
    payload = {
        "mlp": _load_json(args.mlp),
        "x_dim": args.x_dim,
        "function_name": args.name,
        "emit_source_text": args.out_src is not None,
    }
    resp = _post(args, "/codegen", payload)
    _write_text(args.out_ir, resp["ir"])
    _err(f"wrote tape IR to {args.out_ir}")
    if args.out_src is not None:
        _write_text(args.out_src, resp["source"])
        _err(f"wrote source to {args.out_src}")
    print(_summary_line([
        ("registers", int(resp["registers"])),
        ("instructions", int(resp["instructions"])),
    ]))
    return _EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuropt",
        description="Fit learned field models, solve the navigation and "
                    "trajectory case studies, check derivatives, and emit "
                    "instruction tapes.",
    )
    parser.add_argument(
        "--server",
        help="base URL of a running service; without it the service runs in-process",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_fit(name: str, text: str):
        q = sub.add_parser(name, help=text)
        q.add_argument("--scenario", required=True, help="scenario JSON file")
        q.add_argument("--out", required=True, help="output weights file")
        q.add_argument("--samples", type=int, default=5000)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--hidden", default="64,64", help='hidden sizes, e.g. "64,64"')
        q.add_argument("--epochs", type=int, default=None)
        q.add_argument("--lr", type=float, default=None)
        q.add_argument("--batch-size", type=int, default=None)
        return q

    add_fit("fit-flow", "fit the flow-field model from a fish scenario")
    add_fit("fit-density", "fit the density model from a trajectory scenario")

    q = sub.add_parser("solve-fish", help="solve the navigation problem")
    q.add_argument("--scenario", required=True)
    grp = q.add_mutually_exclusive_group(required=True)
    grp.add_argument("--flow", help="flow model weights file")
    grp.add_argument("--analytic", action="store_true",
                     help="use the scenario's analytic flow field")
    q.add_argument("--out", required=True, help="output trajectory CSV")
    q.add_argument("--tol", type=float, default=1e-8)
    q.add_argument("--max-iter", type=int, default=500)

    q = sub.add_parser("solve-traj", help="two-phase minimum-snap trajectory solve")
    q.add_argument("--scenario", required=True)
    grp = q.add_mutually_exclusive_group(required=True)
    grp.add_argument("--density", help="density model weights file")
    grp.add_argument("--analytic", action="store_true",
                     help="use the scenario's analytic density field")
    q.add_argument("--out", required=True, help="output trajectory CSV")
    q.add_argument("--mu-phase2", type=float, default=1e-4,
                   help="initial barrier weight for the warm-started phase")
    q.add_argument("--tol", type=float, default=1e-8)
    q.add_argument("--max-iter", type=int, default=500)

    q = sub.add_parser("check-grad", help="finite-difference check of a model's Jacobian")
    q.add_argument("--mlp", required=True)
    q.add_argument("--trials", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--tolerance", type=float, default=1e-6)

    q = sub.add_parser("codegen", help="lower a model to a tape and emit IR/source")
    q.add_argument("--mlp", required=True)
    q.add_argument("--x-dim", type=int, required=True)
    q.add_argument("--out-ir", required=True)
    q.add_argument("--out-src", default=None)
    q.add_argument("--name", default="mlp_forward")

    return parser


_HANDLERS = {
    "fit-flow": lambda a: _cmd_fit(a, "/fit/flow"),
    "fit-density": lambda a: _cmd_fit(a, "/fit/density"),
    "solve-fish": _cmd_solve_fish,
    "solve-traj": _cmd_solve_traj,
    "check-grad": _cmd_check_grad,
    "codegen": _cmd_codegen,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return _EXIT_OK if exc.code in (0, None) else _EXIT_USAGE
    try:
        return _HANDLERS[args.command](args)
    except SolveAborted:
        return _EXIT_NOT_CONVERGED
    except CliError as exc:
        _err(str(exc))
        return _EXIT_USAGE
    except ln.MlpError as exc:
        _err(str(exc))
        return _EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
