import ctypes
import os
import shutil
import subprocess

import numpy as np
import pytest

import neuropt.codegen as cg
import neuropt.learned as ln
import neuropt.symgraph as sg
from helpers import random_expression, random_mlp_spec


def tape_matches_graph(fn, tape, points, atol=1e-12):
    worst = 0.0
    for p in points:
        via_graph = sg.evaluate(fn, p)
        via_tape = cg.eval_tape(tape, p)
        for a, b in zip(via_graph, via_tape):
            worst = max(worst, float(np.abs(a - b).max()))
    return worst <= atol, worst


class TestLowering:
    def test_identity_aliases_input(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        tape = cg.lower(sg.SymFunction([x], [x]))
        assert len(tape.instructions) == 0
        assert tape.outputs[0][0] == tape.inputs[0][0]
        assert (cg.eval_tape(tape, [np.array([[2.5]])])[0] == 2.5).all()

    def test_tanh_single_instruction(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        tape = cg.lower(sg.SymFunction([x], [sg.tanh(x)]))
        assert len(tape.instructions) == 1
        assert tape.instructions[0].opcode == "tanh"

    def test_matmul_equivalence(self):
        rng = np.random.default_rng(0)
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        w = g.constant(rng.normal(size=(2, 2)))
        fn = sg.SymFunction([x], [sg.matmul(w, x)])
        tape = cg.lower(fn)
        ok, worst = tape_matches_graph(
            fn, tape, [[rng.uniform(-3, 3, size=(2, 1))] for _ in range(100)]
        )
        assert ok, worst

    def test_constant_function(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        c = g.constant([[1.5], [2.5], [-3.5]])
        tape = cg.lower(sg.SymFunction([x], [c]))
        out = cg.eval_tape(tape, [np.zeros((2, 1))])[0]
        assert (out == np.array([[1.5], [2.5], [-3.5]])).all()
        out = cg.eval_tape(tape, [np.ones((2, 1))])[0]
        assert (out == np.array([[1.5], [2.5], [-3.5]])).all()

    def test_transpose_and_concat(self):
        g = sg.ExprGraph()
        a = g.symbol("a", 2, 2)
        fn = sg.SymFunction([a], [sg.concat([sg.transpose(a), a])])
        tape = cg.lower(fn)
        v = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert (cg.eval_tape(tape, [v])[0] == np.vstack([v.T, v])).all()

    def test_pow_variants(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        exprs = [sg.power(x, 2.0), sg.power(x, 5.0), sg.power(x, -2.0),
                 sg.power(x, 0.5), sg.power(x, 0.0)]
        fn = sg.SymFunction([x], exprs)
        tape = cg.lower(fn)
        for v in (0.7, 1.9, 3.2):
            a = sg.evaluate(fn, [np.array([[v]])])
            b = cg.eval_tape(tape, [np.array([[v]])])
            for u, w in zip(a, b):
                assert abs(u[0, 0] - w[0, 0]) <= 1e-12

    def test_random_expressions_equivalent(self):
        rng = np.random.default_rng(21)
        for _ in range(15):
            fn, n = random_expression(rng)
            tape = cg.lower(fn)
            pts = [[rng.uniform(-2, 2, size=(n, 1))] for _ in range(5)]
            ok, worst = tape_matches_graph(fn, tape, pts)
            assert ok, worst

    def test_mlp_with_jacobian_equivalent(self):
        rng = np.random.default_rng(33)
        spec = random_mlp_spec(rng, in_features=3, out_features=2,
                               max_hidden_layers=2, max_width=12)
        g = sg.ExprGraph()
        x = g.symbol("x", 3, 1)
        y = ln.embed_mlp(spec, x)
        fn = sg.SymFunction([x], [y, sg.jacobian(y, x)])
        tape = cg.lower(fn)
        pts = [[rng.uniform(-2, 2, size=(3, 1))] for _ in range(25)]
        ok, worst = tape_matches_graph(fn, tape, pts)
        assert ok, worst

    def test_single_assignment_validated(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        tape = cg.lower(sg.SymFunction([x], [sg.tanh(x) + 1.0]))
        cg.validate_tape(tape)
        bad = cg.Tape(
            n_registers=tape.n_registers,
            inputs=tape.inputs,
            outputs=tape.outputs,
            constants=tape.constants,
            instructions=tape.instructions + (cg.Instr("tanh", 1, (("r", 0),)),),
        )
        with pytest.raises(cg.TapeError, match="written twice"):
            cg.validate_tape(bad)

    def test_read_before_write_rejected(self):
        bad = cg.Tape(
            n_registers=3,
            inputs=((0, (1, 1)),),
            outputs=((2, (1, 1)),),
            constants=(),
            instructions=(cg.Instr("tanh", 2, (("r", 1),)),),
        )
        with pytest.raises(cg.TapeError, match="read before write"):
            cg.validate_tape(bad)


class TestIrText:
    def test_tanh_is_five_lines(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        text = cg.emit_ir_text(cg.lower(sg.SymFunction([x], [sg.tanh(x)])))
        lines = text.strip().splitlines()
        assert len(lines) == 5
        assert lines[0] == "neuropt-tape v1"
        assert lines[1].startswith("in ")
        assert lines[2].startswith("tanh ")
        assert lines[3].startswith("out ")
        assert lines[4] == "end"

    def test_round_trip_identical_evaluation(self):
        rng = np.random.default_rng(5)
        fn, n = random_expression(rng)
        tape = cg.lower(fn)
        back = cg.parse_ir_text(cg.emit_ir_text(tape))
        for _ in range(5):
            v = rng.uniform(-2, 2, size=(n, 1))
            a = cg.eval_tape(tape, [v])
            b = cg.eval_tape(back, [v])
            assert all((u == w).all() for u, w in zip(a, b))

    def test_emit_is_byte_stable(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        fn = sg.SymFunction([x], [sg.sumsq(sg.tanh(x) * 2.0)])
        tape = cg.lower(fn)
        assert cg.emit_ir_text(tape) == cg.emit_ir_text(tape)
        tape2 = cg.lower(sg.SymFunction([x], [sg.sumsq(sg.tanh(x) * 2.0)]))
        assert cg.emit_ir_text(tape) == cg.emit_ir_text(tape2)

    def test_parser_accepts_regs_line(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        tape = cg.lower(sg.SymFunction([x], [sg.tanh(x)]))
        text = cg.emit_ir_text(tape)
        lines = text.splitlines()
        lines.insert(1, f"regs {tape.n_registers}")
        back = cg.parse_ir_text("\n".join(lines) + "\n")
        v = np.array([[0.4]])
        assert (cg.eval_tape(back, [v])[0] == cg.eval_tape(tape, [v])[0]).all()

    def test_parser_rejects_bad_header(self):
        with pytest.raises(cg.TapeError, match="header"):
            cg.parse_ir_text("something v2\nend\n")

    def test_parser_rejects_unknown_opcode(self):
        with pytest.raises(cg.TapeError, match="opcode"):
            cg.parse_ir_text("neuropt-tape v1\nin 0 1 1\nfrobnicate r1 r0\nout 1 1 1\nend\n")


class TestSourceEmission:
    def test_tanh_source_has_one_tanh_call(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        src = cg.emit_source(cg.lower(sg.SymFunction([x], [sg.tanh(x)])), "squash")
        assert src.count("tanh(") == 1
        assert "void squash(const double* in, double* out)" in src
        assert "#include <math.h>" in src

    def test_source_deterministic(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        tape = cg.lower(sg.SymFunction([x], [sg.sumsq(x)]))
        assert cg.emit_source(tape, "q") == cg.emit_source(tape, "q")

    def test_invalid_identifier_rejected(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        tape = cg.lower(sg.SymFunction([x], [x]))
        for bad in ("", "1abc", "a b", "no-dash"):
            with pytest.raises(cg.TapeError):
                cg.emit_source(tape, bad)


@pytest.mark.skipif(shutil.which("cc") is None, reason="no C toolchain")
class TestCompiledSource:
    def test_compiled_matches_interpreter(self, tmp_path):
        rng = np.random.default_rng(9)
        spec = random_mlp_spec(rng, in_features=2, out_features=2,
                               max_hidden_layers=2, max_width=10)
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        y = ln.embed_mlp(spec, x)
        fn = sg.SymFunction([x], [y, sg.jacobian(y, x)])
        tape = cg.lower(fn)
        src = cg.emit_source(tape, "model_fn")
        cpath = tmp_path / "m.c"
        sopath = tmp_path / "m.so"
        cpath.write_text(src)
        subprocess.run(
            ["cc", "-O2", "-shared", "-fPIC", "-o", str(sopath), str(cpath), "-lm"],
            check=True, capture_output=True,
        )
        lib = ctypes.CDLL(str(sopath))
        lib.model_fn.argtypes = [ctypes.POINTER(ctypes.c_double)] * 2
        n_in = sum(r * c for _, (r, c) in tape.inputs)
        n_out = sum(r * c for _, (r, c) in tape.outputs)
        worst = 0.0
        for _ in range(25):
            v = rng.uniform(-2, 2, size=(2, 1))
            buf_in = (ctypes.c_double * n_in)(*v.ravel())
            buf_out = (ctypes.c_double * n_out)()
            lib.model_fn(buf_in, buf_out)
            ref = np.concatenate([o.ravel() for o in cg.eval_tape(tape, [v])])
            worst = max(worst, float(np.abs(np.array(buf_out) - ref).max()))
        assert worst <= 1e-12
