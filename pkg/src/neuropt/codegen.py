"""Lower symbolic functions to a flat scalar instruction tape.

Matrix operations are scalarized at lowering time: a matrix product becomes
a chain of multiply-adds, transposition and concatenation become pure
register bookkeeping, and elementwise ops expand entry by entry.  The tape
is single-assignment (every register written at most once, inputs written
only by the caller) and instruction operands may reference either registers
or entries of a constant pool.

Two emitters share the tape: a line-oriented textual IR (``neuropt-tape
v1``) that parses back to an equivalent tape, and portable C-compatible
source with one function of signature
``void name(const double* in, double* out)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import symgraph as sg
from .symgraph import OpKind


class TapeError(ValueError):
    """Raised for malformed tapes, IR text, or evaluation inputs."""


# Operand: ("r", register) or ("c", constant-pool index).
Operand = tuple[str, int]

_OPCODES = {
    "loadconst", "add", "sub", "mul", "div", "neg", "tanh", "sigmoid",
    "relu", "step", "exp", "log", "sin", "cos", "sqrt", "fma",
}

_ARITY = {
    "loadconst": 1, "add": 2, "sub": 2, "mul": 2, "div": 2, "neg": 1,
    "tanh": 1, "sigmoid": 1, "relu": 1, "step": 1, "exp": 1, "log": 1,
    "sin": 1, "cos": 1, "sqrt": 1, "fma": 3,
}


@dataclass(frozen=True)
class Instr:
    opcode: str
    dest: int
    operands: tuple[Operand, ...]


@dataclass(frozen=True)
class Tape:
    n_registers: int
    inputs: tuple[tuple[int, tuple[int, int]], ...]   # (start register, shape)
    outputs: tuple[tuple[int, tuple[int, int]], ...]
    constants: tuple[float, ...]
    instructions: tuple[Instr, ...]


def validate_tape(t: Tape) -> None:
    """Structural check: single assignment and no read-before-write."""
    written: set[int] = set()
    for start, (r, c) in t.inputs:
        for k in range(start, start + r * c):
            if k in written:
                raise TapeError(f"input register r{k} assigned twice")
            written.add(k)
    n_const = len(t.constants)
    for pos, ins in enumerate(t.instructions):
        if ins.opcode not in _OPCODES:
            raise TapeError(f"instruction {pos}: unknown opcode '{ins.opcode}'")
        if len(ins.operands) != _ARITY[ins.opcode]:
            raise TapeError(
                f"instruction {pos}: '{ins.opcode}' expects "
                f"{_ARITY[ins.opcode]} operands, got {len(ins.operands)}"
            )
        if ins.opcode == "loadconst" and ins.operands[0][0] != "c":
            raise TapeError(f"instruction {pos}: loadconst needs a constant operand")
        for kind, idx in ins.operands:
            if kind == "r":
                if idx not in written:
                    raise TapeError(
                        f"instruction {pos}: register r{idx} read before write"
                    )
            elif kind == "c":
                if not 0 <= idx < n_const:
                    raise TapeError(f"instruction {pos}: constant c{idx} out of range")
            else:
                raise TapeError(f"instruction {pos}: bad operand kind '{kind}'")
        if ins.dest in written:
            raise TapeError(f"instruction {pos}: register r{ins.dest} written twice")
        if not 0 <= ins.dest < t.n_registers:
            raise TapeError(f"instruction {pos}: register r{ins.dest} out of range")
        written.add(ins.dest)
    for start, (r, c) in t.outputs:
        for k in range(start, start + r * c):
            if k not in written:
                raise TapeError(f"output register r{k} never written")


# ---------------------------------------------------------------------------
# Lowering
# ---------------------------------------------------------------------------

class _TapeBuilder:
    def __init__(self):
        self.next_reg = 0
        self.instrs: list[Instr] = []
        self.pool: list[float] = []
        self._pool_ids: dict[bytes, int] = {}

    def const(self, value: float) -> Operand:
        key = np.float64(value).tobytes()
        idx = self._pool_ids.get(key)
        if idx is None:
            idx = len(self.pool)
            self.pool.append(float(value))
            self._pool_ids[key] = idx
        return ("c", idx)

    def alloc(self, count: int = 1) -> int:
        start = self.next_reg
        self.next_reg += count
        return start

    def emit(self, opcode: str, *operands: Operand) -> Operand:
        dest = self.alloc()
        self.instrs.append(Instr(opcode, dest, tuple(operands)))
        return ("r", dest)


def _is_const_op(op: Operand) -> bool:
    return op[0] == "c"


def _const_of(builder: _TapeBuilder, op: Operand) -> float:
    return builder.pool[op[1]]


def _emit_dot(builder: _TapeBuilder, terms: list[tuple[Operand, Operand]]) -> Operand:
    """Inner product as a multiply / fused multiply-add chain.

    Terms with an exactly-zero constant factor contribute nothing and are
    skipped; unit constant factors collapse to the other factor.
    """
    live: list[tuple[Operand, Operand]] = []
    for a, b in terms:
        if _is_const_op(a) and _const_of(builder, a) == 0.0:
            continue
        if _is_const_op(b) and _const_of(builder, b) == 0.0:
            continue
        live.append((a, b))
    if not live:
        return builder.const(0.0)
    acc: Operand | None = None
    for a, b in live:
        unit_a = _is_const_op(a) and _const_of(builder, a) == 1.0
        unit_b = _is_const_op(b) and _const_of(builder, b) == 1.0
        if acc is None:
            if unit_a:
                acc = b
            elif unit_b:
                acc = a
            else:
                acc = builder.emit("mul", a, b)
        else:
            if unit_a:
                acc = builder.emit("add", b, acc)
            elif unit_b:
                acc = builder.emit("add", a, acc)
            else:
                acc = builder.emit("fma", a, b, acc)
    return acc


def lower(f: sg.SymFunction) -> Tape:
    """Scalarize a symbolic function into a single-assignment tape."""
    builder = _TapeBuilder()
    graph = f.graph
    nodes = graph._nodes

    slots: dict[int, list[Operand]] = {}
    inputs = []
    for ref in f.inputs:
        r, c = ref.shape
        start = builder.alloc(r * c)
        slots[ref.index] = [("r", start + k) for k in range(r * c)]
        inputs.append((start, (r, c)))

    unary_ops = {
        OpKind.NEG: "neg", OpKind.TANH: "tanh", OpKind.SIGMOID: "sigmoid",
        OpKind.RELU: "relu", OpKind.STEP: "step", OpKind.EXP: "exp",
        OpKind.LOG: "log", OpKind.SIN: "sin", OpKind.COS: "cos",
        OpKind.SQRT: "sqrt",
    }
    binary_ops = {OpKind.ADD: "add", OpKind.SUB: "sub",
                  OpKind.MUL: "mul", OpKind.DIV: "div"}

    for idx, op, ops, payload in f._schedule:
        node = nodes[idx]
        rows, cols = node.rows, node.cols
        if op is OpKind.CONSTANT:
            slots[idx] = [builder.const(v) for v in payload.ravel()]
        elif op in binary_ops:
            a, b = slots[ops[0]], slots[ops[1]]
            asz, bsz = len(a), len(b)
            out = []
            for k in range(rows * cols):
                pa = a[0] if asz == 1 else a[k]
                pb = b[0] if bsz == 1 else b[k]
                out.append(builder.emit(binary_ops[op], pa, pb))
            slots[idx] = out
        elif op in unary_ops:
            slots[idx] = [builder.emit(unary_ops[op], s) for s in slots[ops[0]]]
        elif op is OpKind.POW:
            slots[idx] = [_emit_pow(builder, s, payload) for s in slots[ops[0]]]
        elif op is OpKind.MATMUL:
            a, b = slots[ops[0]], slots[ops[1]]
            inner = nodes[ops[0]].cols
            bcols = nodes[ops[1]].cols
            out = []
            for i in range(rows):
                for j in range(cols):
                    terms = [
                        (a[i * inner + k], b[k * bcols + j]) for k in range(inner)
                    ]
                    out.append(_emit_dot(builder, terms))
            slots[idx] = out
        elif op is OpKind.TRANSPOSE:
            # result (i, j) reads source (j, i); registers are just re-ordered
            src = slots[ops[0]]
            src_cols = nodes[ops[0]].cols
            slots[idx] = [
                src[j * src_cols + i]
                for i in range(rows)
                for j in range(cols)
            ]
        elif op is OpKind.CONCAT:
            merged: list[Operand] = []
            for o in ops:
                merged.extend(slots[o])
            slots[idx] = merged
        elif op is OpKind.SUMSQ:
            src = slots[ops[0]]
            slots[idx] = [_emit_dot(builder, [(s, s) for s in src])]
        else:  # pragma: no cover - closed op set
            raise TapeError(f"cannot lower op {op}")

    outputs = []
    for ref in f.outputs:
        r, c = ref.shape
        out_slots = slots[ref.index]
        outputs.append((_materialize(builder, out_slots), (r, c)))

    tape = Tape(
        n_registers=builder.next_reg,
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        constants=tuple(builder.pool),
        instructions=tuple(builder.instrs),
    )
    validate_tape(tape)
    return tape


def _emit_pow(builder: _TapeBuilder, base: Operand, exponent: float) -> Operand:
    """Elementwise power.  Integer exponents become multiply chains;
    non-integer exponents go through exp(p * log(x)) and therefore require a
    positive base at run time."""
    if exponent == 0.0:
        return builder.const(1.0)
    if float(exponent).is_integer() and abs(exponent) <= 64:
        p = int(abs(exponent))
        acc = base
        for _ in range(p - 1):
            acc = builder.emit("mul", acc, base)
        if exponent < 0:
            acc = builder.emit("div", builder.const(1.0), acc)
        return acc
    lg = builder.emit("log", base)
    scaled = builder.emit("mul", lg, builder.const(float(exponent)))
    return builder.emit("exp", scaled)


def _materialize(builder: _TapeBuilder, out_slots: list[Operand]) -> int:
    """Return a contiguous register range holding the given slots.

    Slots that already form an ascending contiguous register run are aliased
    directly (the identity function lowers to zero instructions); otherwise
    each element is copied via an exact operation (loadconst for constants,
    multiply-by-one for registers).
    """
    if all(kind == "r" for kind, _ in out_slots):
        regs = [idx for _, idx in out_slots]
        if regs == list(range(regs[0], regs[0] + len(regs))):
            return regs[0]
    start = builder.next_reg
    one = builder.const(1.0)
    for kind, idx in out_slots:
        if kind == "c":
            builder.emit("loadconst", ("c", idx))
        else:
            builder.emit("mul", ("r", idx), one)
    return start


# ---------------------------------------------------------------------------
# Interpretation
# ---------------------------------------------------------------------------

def _sigmoid(v: float) -> float:
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def eval_tape(t: Tape, inputs: Sequence) -> list[np.ndarray]:
    """Sequentially interpret the tape in double precision."""
    if len(inputs) != len(t.inputs):
        raise TapeError(f"expected {len(t.inputs)} inputs, got {len(inputs)}")
    regs = [0.0] * t.n_registers
    for (start, shape), val in zip(t.inputs, inputs):
        arr = np.asarray(val, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1) if shape[1] == 1 else arr.reshape(1, -1)
        if tuple(arr.shape) != shape:
            raise TapeError(f"input has shape {tuple(arr.shape)}, expected {shape}")
        flat = arr.ravel()
        for k in range(flat.shape[0]):
            regs[start + k] = float(flat[k])
    pool = t.constants

    def read(opnd: Operand) -> float:
        kind, idx = opnd
        return regs[idx] if kind == "r" else pool[idx]

    for ins in t.instructions:
        op = ins.opcode
        o = ins.operands
        if op == "fma":
            regs[ins.dest] = read(o[0]) * read(o[1]) + read(o[2])
        elif op == "mul":
            regs[ins.dest] = read(o[0]) * read(o[1])
        elif op == "add":
            regs[ins.dest] = read(o[0]) + read(o[1])
        elif op == "sub":
            regs[ins.dest] = read(o[0]) - read(o[1])
        elif op == "div":
            regs[ins.dest] = read(o[0]) / read(o[1])
        elif op == "neg":
            regs[ins.dest] = -read(o[0])
        elif op == "tanh":
            regs[ins.dest] = math.tanh(read(o[0]))
        elif op == "sigmoid":
            regs[ins.dest] = _sigmoid(read(o[0]))
        elif op == "relu":
            v = read(o[0])
            regs[ins.dest] = v if v > 0.0 else 0.0
        elif op == "step":
            regs[ins.dest] = 1.0 if read(o[0]) > 0.0 else 0.0
        elif op == "exp":
            v = read(o[0])
            try:
                regs[ins.dest] = math.exp(v)
            except OverflowError:
                regs[ins.dest] = math.inf
        elif op == "log":
            regs[ins.dest] = math.log(read(o[0]))
        elif op == "sin":
            regs[ins.dest] = math.sin(read(o[0]))
        elif op == "cos":
            regs[ins.dest] = math.cos(read(o[0]))
        elif op == "sqrt":
            regs[ins.dest] = math.sqrt(read(o[0]))
        elif op == "loadconst":
            regs[ins.dest] = pool[o[0][1]]
        else:  # pragma: no cover - validated opcodes
            raise TapeError(f"unknown opcode '{op}'")

    out = []
    for start, (r, c) in t.outputs:
        arr = np.array(regs[start:start + r * c], dtype=np.float64).reshape(r, c)
        out.append(arr)
    return out


# ---------------------------------------------------------------------------
# Textual IR
# ---------------------------------------------------------------------------

_IR_HEADER = "neuropt-tape v1"


def _fmt17(x: float) -> str:
    return format(float(x), ".17g")


def _operand_text(op: Operand) -> str:
    return f"{op[0]}{op[1]}"


def emit_ir_text(t: Tape) -> str:
    """Canonical line-oriented IR; byte-stable for a given tape."""
    lines = [_IR_HEADER]
    for i, v in enumerate(t.constants):
        lines.append(f"const {i} {_fmt17(v)}")
    for start, (r, c) in t.inputs:
        lines.append(f"in {start} {r} {c}")
    for ins in t.instructions:
        parts = [ins.opcode, f"r{ins.dest}"]
        parts.extend(_operand_text(o) for o in ins.operands)
        lines.append(" ".join(parts))
    for start, (r, c) in t.outputs:
        lines.append(f"out {start} {r} {c}")
    lines.append("end")
    return "\n".join(lines) + "\n"


_OPERAND_RE = re.compile(r"^([rc])(\d+)$")


def parse_ir_text(text: str) -> Tape:
    """Parse the textual IR back into a tape (inverse of emit_ir_text)."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _IR_HEADER:
        raise TapeError(f"missing IR header '{_IR_HEADER}'")
    if lines[-1] != "end":
        raise TapeError("IR text must end with 'end'")
    constants: list[float] = []
    inputs: list[tuple[int, tuple[int, int]]] = []
    outputs: list[tuple[int, tuple[int, int]]] = []
    instrs: list[Instr] = []
    n_regs = 0

    def reg_hint(r):
        nonlocal n_regs
        n_regs = max(n_regs, r + 1)

    for lineno, line in enumerate(lines[1:-1], start=2):
        parts = line.split()
        head = parts[0]
        if head == "const":
            if len(parts) != 3:
                raise TapeError(f"line {lineno}: malformed const line")
            idx = int(parts[1])
            if idx != len(constants):
                raise TapeError(f"line {lineno}: const indices must be sequential")
            constants.append(float(parts[2]))
        elif head == "regs":
            if len(parts) != 2:
                raise TapeError(f"line {lineno}: malformed regs line")
            reg_hint(int(parts[1]) - 1)
        elif head in ("in", "out"):
            if len(parts) != 4:
                raise TapeError(f"line {lineno}: malformed {head} line")
            start, r, c = int(parts[1]), int(parts[2]), int(parts[3])
            reg_hint(start + r * c - 1)
            (inputs if head == "in" else outputs).append((start, (r, c)))
        else:
            if head not in _OPCODES:
                raise TapeError(f"line {lineno}: unknown opcode '{head}'")
            if len(parts) < 2:
                raise TapeError(f"line {lineno}: missing destination")
            m = _OPERAND_RE.match(parts[1])
            if not m or m.group(1) != "r":
                raise TapeError(f"line {lineno}: destination must be a register")
            dest = int(m.group(2))
            reg_hint(dest)
            operands = []
            for tok in parts[2:]:
                m = _OPERAND_RE.match(tok)
                if not m:
                    raise TapeError(f"line {lineno}: bad operand '{tok}'")
                kind, idx = m.group(1), int(m.group(2))
                if kind == "r":
                    reg_hint(idx)
                operands.append((kind, idx))
            instrs.append(Instr(head, dest, tuple(operands)))

    tape = Tape(
        n_registers=n_regs,
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        constants=tuple(constants),
        instructions=tuple(instrs),
    )
    validate_tape(tape)
    return tape


# ---------------------------------------------------------------------------
# Portable source emission
# ---------------------------------------------------------------------------

_IDENTIFIER_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

_C_UNARY_FMT = {
    "neg": "-({0})",
    "tanh": "tanh({0})",
    "sigmoid": "1.0 / (1.0 + exp(-({0})))",
    "relu": "(({0}) > 0.0 ? ({0}) : 0.0)",
    "step": "(({0}) > 0.0 ? 1.0 : 0.0)",
    "exp": "exp({0})",
    "log": "log({0})",
    "sin": "sin({0})",
    "cos": "cos({0})",
    "sqrt": "sqrt({0})",
}

_C_BINARY_FMT = {
    "add": "{0} + {1}",
    "sub": "{0} - {1}",
    "mul": "{0} * {1}",
    "div": "{0} / {1}",
}


def emit_source(t: Tape, function_name: str) -> str:
    """Emit the tape as one self-contained C-compatible function.

    The function takes flat input and output arrays of doubles; the only
    header dependency is the standard math library.  Multiply-adds are
    spelled out as separate multiply and add so results stay bit-comparable
    with the interpreter.
    """
    if not _IDENTIFIER_RE.match(function_name or ""):
        raise TapeError(f"'{function_name}' is not a valid identifier")
    validate_tape(t)

    def opnd(o: Operand) -> str:
        kind, idx = o
        return f"r[{idx}]" if kind == "r" else _fmt17(t.constants[idx])

    lines = [
        "#include <math.h>",
        "",
        f"void {function_name}(const double* in, double* out)",
        "{",
        f"    double r[{max(t.n_registers, 1)}];",
    ]
    pos = 0
    for start, (r, c) in t.inputs:
        for k in range(r * c):
            lines.append(f"    r[{start + k}] = in[{pos}];")
            pos += 1
    for ins in t.instructions:
        o = ins.operands
        if ins.opcode == "fma":
            expr = f"{opnd(o[0])} * {opnd(o[1])} + {opnd(o[2])}"
        elif ins.opcode == "loadconst":
            expr = opnd(o[0])
        elif ins.opcode in _C_BINARY_FMT:
            expr = _C_BINARY_FMT[ins.opcode].format(opnd(o[0]), opnd(o[1]))
        else:
            expr = _C_UNARY_FMT[ins.opcode].format(opnd(o[0]))
        lines.append(f"    r[{ins.dest}] = {expr};")
    pos = 0
    for start, (r, c) in t.outputs:
        for k in range(r * c):
            lines.append(f"    out[{pos}] = r[{start + k}];")
            pos += 1
    lines.append("}")
    return "\n".join(lines) + "\n"
