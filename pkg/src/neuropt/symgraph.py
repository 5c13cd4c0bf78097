"""Immutable symbolic expression graphs over real-valued matrices.

An :class:`ExprGraph` is an append-only list of matrix-valued operation
nodes; an :class:`ExprRef` is a lightweight handle to one node.  Graphs are
acyclic by construction (operands always have smaller indices than the node
that consumes them) and nodes are never mutated once created, so a finalized
:class:`SymFunction` can be evaluated concurrently from several threads as
long as each call owns its own scratch storage (which :func:`evaluate`
guarantees).

Derivatives are produced symbolically: :func:`jacobian` and :func:`hessian`
append new nodes implementing the reverse-mode adjoint recurrences, so the
result is itself an expression that can be evaluated, differentiated again,
or lowered to a tape.

The only simplification applied to user-built expressions is constant
folding (operations whose operands are all constants collapse to a single
constant node, and equal constants are shared).  The derivative builder
additionally short-circuits multiplications by structural zeros and ones
while it constructs adjoints; without that, reverse-mode graphs over
stacked constraint vectors would grow quadratically.
"""

from __future__ import annotations

import heapq
import itertools
import threading
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for invalid graph construction requests."""


class ShapeError(GraphError):
    """Raised when operand shapes are incompatible with an operation."""


class EvalError(ValueError):
    """Raised for invalid numeric evaluation (arity, shape, domain)."""

    def __init__(self, message: str, node: int | None = None):
        if node is not None:
            message = f"{message} (node {node})"
        super().__init__(message)
        self.node = node


class OpKind(Enum):
    SYMBOL = "symbol"
    CONSTANT = "constant"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    POW = "pow"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    CONCAT = "concat"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    RELU = "relu"
    EXP = "exp"
    LOG = "log"
    SIN = "sin"
    COS = "cos"
    SQRT = "sqrt"
    SUMSQ = "sumsq"
    # Subgradient indicator of the rectifier: 1 for positive inputs, 0 at and
    # below zero.  Needed so the derivative of RELU is itself expressible;
    # its own derivative is zero everywhere.
    STEP = "step"


_ELEMENTWISE_BINARY = frozenset({OpKind.ADD, OpKind.SUB, OpKind.MUL, OpKind.DIV})
_UNARY = frozenset(
    {
        OpKind.NEG,
        OpKind.TANH,
        OpKind.SIGMOID,
        OpKind.RELU,
        OpKind.EXP,
        OpKind.LOG,
        OpKind.SIN,
        OpKind.COS,
        OpKind.SQRT,
        OpKind.STEP,
    }
)


class _Node:
    __slots__ = ("op", "operands", "rows", "cols", "payload", "name", "zero")

    def __init__(self, op, operands, rows, cols, payload=None, name=None, zero=False):
        self.op = op
        self.operands = operands
        self.rows = rows
        self.cols = cols
        self.payload = payload
        self.name = name
        self.zero = zero


def as_matrix(values) -> np.ndarray:
    """Convert nested sequences / arrays / scalars to a 2-D float64 matrix.

    Scalars become (1,1); 1-D sequences become column vectors.  Ragged input
    is rejected.
    """
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise GraphError(f"matrix payload is not rectangular numeric data: {exc}") from None
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise GraphError(f"matrix payload must be at most 2-D, got {arr.ndim}-D")
    if arr.size == 0:
        raise GraphError("matrix payload must be nonempty")
    return arr


class ExprRef:
    """Handle to one node of an :class:`ExprGraph`."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "ExprGraph", index: int):
        self.graph = graph
        self.index = index

    @property
    def shape(self) -> tuple[int, int]:
        node = self.graph._nodes[self.index]
        return (node.rows, node.cols)

    @property
    def op(self) -> OpKind:
        return self.graph._nodes[self.index].op

    @property
    def name(self) -> str | None:
        return self.graph._nodes[self.index].name

    def is_scalar(self) -> bool:
        return self.shape == (1, 1)

    def __repr__(self):
        node = self.graph._nodes[self.index]
        tag = f" '{node.name}'" if node.name else ""
        return f"<expr #{self.index} {node.op.value}{tag} {node.rows}x{node.cols}>"

    def __eq__(self, other):
        return (
            isinstance(other, ExprRef)
            and other.graph is self.graph
            and other.index == self.index
        )

    def __hash__(self):
        return hash((id(self.graph), self.index))

    # Arithmetic sugar; plain numbers are lifted to constant nodes.
    def __add__(self, other):
        return apply_binary(OpKind.ADD, self, _lift(self.graph, other))

    def __radd__(self, other):
        return apply_binary(OpKind.ADD, _lift(self.graph, other), self)

    def __sub__(self, other):
        return apply_binary(OpKind.SUB, self, _lift(self.graph, other))

    def __rsub__(self, other):
        return apply_binary(OpKind.SUB, _lift(self.graph, other), self)

    def __mul__(self, other):
        return apply_binary(OpKind.MUL, self, _lift(self.graph, other))

    def __rmul__(self, other):
        return apply_binary(OpKind.MUL, _lift(self.graph, other), self)

    def __truediv__(self, other):
        return apply_binary(OpKind.DIV, self, _lift(self.graph, other))

    def __rtruediv__(self, other):
        return apply_binary(OpKind.DIV, _lift(self.graph, other), self)

    def __neg__(self):
        return apply_unary(OpKind.NEG, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "ExprRef":
        return transpose(self)


def _lift(graph: "ExprGraph", value) -> ExprRef:
    if isinstance(value, ExprRef):
        if value.graph is not graph:
            raise GraphError("operands belong to different graphs")
        return value
    return graph.constant(value)


class ExprGraph:
    """Append-only DAG of matrix operations.

    Construction is confined to a single thread per graph; finished
    functions are immutable and safe to share.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._symbol_ids: dict[str, int] = {}
        self._const_ids: dict[tuple, int] = {}

    def __len__(self):
        return len(self._nodes)

    def _add_node(self, op, operands, rows, cols, payload=None, name=None, zero=False) -> ExprRef:
        n = len(self._nodes)
        assert all(0 <= o < n for o in operands), "graph would not be acyclic"
        assert rows >= 1 and cols >= 1
        self._nodes.append(_Node(op, tuple(operands), rows, cols, payload, name, zero))
        return ExprRef(self, n)

    def symbol(self, name: str, rows: int, cols: int) -> ExprRef:
        """Create a named symbolic matrix variable of shape (rows, cols)."""
        if not name:
            raise GraphError("symbol name must be nonempty")
        if rows < 1 or cols < 1:
            raise ShapeError(f"symbol '{name}' needs positive dimensions, got ({rows}, {cols})")
        if name in self._symbol_ids:
            raise GraphError(f"duplicate symbol name '{name}' in graph")
        ref = self._add_node(OpKind.SYMBOL, (), int(rows), int(cols), name=name)
        self._symbol_ids[name] = ref.index
        return ref

    def constant(self, values) -> ExprRef:
        """Create (or reuse) a constant node carrying `values`."""
        arr = as_matrix(values)
        arr = np.ascontiguousarray(arr)
        key = (arr.shape[0], arr.shape[1], arr.tobytes())
        hit = self._const_ids.get(key)
        if hit is not None:
            return ExprRef(self, hit)
        arr.setflags(write=False)
        ref = self._add_node(
            OpKind.CONSTANT, (), arr.shape[0], arr.shape[1],
            payload=arr, zero=not arr.any(),
        )
        self._const_ids[key] = ref.index
        return ref

    def node(self, index: int) -> _Node:
        return self._nodes[index]


def make_symbol(graph: ExprGraph, name: str, rows: int, cols: int) -> ExprRef:
    return graph.symbol(name, rows, cols)


def make_constant(graph: ExprGraph, values) -> ExprRef:
    return graph.constant(values)


def _same_graph(*refs: ExprRef) -> ExprGraph:
    g = refs[0].graph
    for r in refs[1:]:
        if r.graph is not g:
            raise GraphError("operands belong to different graphs")
    return g


def _is_const(ref: ExprRef) -> bool:
    return ref.graph._nodes[ref.index].op is OpKind.CONSTANT


def _is_zero(ref: ExprRef) -> bool:
    return ref.graph._nodes[ref.index].zero


def _const_value(ref: ExprRef) -> np.ndarray:
    return ref.graph._nodes[ref.index].payload


def _is_one_scalar(ref: ExprRef) -> bool:
    node = ref.graph._nodes[ref.index]
    return (
        node.op is OpKind.CONSTANT
        and node.rows == 1
        and node.cols == 1
        and node.payload[0, 0] == 1.0
    )


def apply_binary(kind: OpKind, a: ExprRef, b: ExprRef) -> ExprRef:
    """Elementwise Add/Sub/Mul/Div.  A (1,1) operand broadcasts."""
    if kind not in _ELEMENTWISE_BINARY:
        raise GraphError(f"{kind} is not an elementwise binary op")
    g = _same_graph(a, b)
    sa, sb = a.shape, b.shape
    if sa == sb:
        out = sa
    elif sa == (1, 1):
        out = sb
    elif sb == (1, 1):
        out = sa
    else:
        raise ShapeError(f"{kind.value}: incompatible shapes {sa} and {sb}")
    if _is_const(a) and _is_const(b):
        folded = _try_fold(kind, _const_value(a), _const_value(b))
        if folded is not None:
            return g.constant(folded)
    return g._add_node(kind, (a.index, b.index), out[0], out[1])


def apply_unary(kind: OpKind, a: ExprRef) -> ExprRef:
    """Elementwise unary op, same shape as the operand."""
    if kind not in _UNARY:
        raise GraphError(f"{kind} is not a unary op")
    if _is_const(a):
        folded = _try_fold(kind, _const_value(a))
        if folded is not None:
            return a.graph.constant(folded)
    r, c = a.shape
    return a.graph._add_node(kind, (a.index,), r, c)


def power(a: ExprRef, exponent: float) -> ExprRef:
    """Elementwise power with a fixed real exponent."""
    exponent = float(exponent)
    if _is_const(a):
        folded = _try_fold(OpKind.POW, _const_value(a), exponent)
        if folded is not None:
            return a.graph.constant(folded)
    r, c = a.shape
    return a.graph._add_node(OpKind.POW, (a.index,), r, c, payload=exponent)


def matmul(a: ExprRef, b: ExprRef) -> ExprRef:
    g = _same_graph(a, b)
    (ra, ca), (rb, cb) = a.shape, b.shape
    if ca != rb:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    if _is_const(a) and _is_const(b):
        return g.constant(_const_value(a) @ _const_value(b))
    return g._add_node(OpKind.MATMUL, (a.index, b.index), ra, cb)


def transpose(a: ExprRef) -> ExprRef:
    if _is_const(a):
        return a.graph.constant(_const_value(a).T)
    r, c = a.shape
    return a.graph._add_node(OpKind.TRANSPOSE, (a.index,), c, r)


def concat(parts: Sequence[ExprRef]) -> ExprRef:
    """Vertical concatenation; all parts must share their column count."""
    parts = list(parts)
    if not parts:
        raise GraphError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    g = _same_graph(*parts)
    cols = parts[0].shape[1]
    for p in parts[1:]:
        if p.shape[1] != cols:
            raise ShapeError(
                f"concat: column counts differ ({cols} vs {p.shape[1]})"
            )
    rows = sum(p.shape[0] for p in parts)
    if all(_is_const(p) for p in parts):
        return g.constant(np.vstack([_const_value(p) for p in parts]))
    return g._add_node(OpKind.CONCAT, tuple(p.index for p in parts), rows, cols)


def sumsq(a: ExprRef) -> ExprRef:
    """Scalar sum of squares of all entries."""
    if _is_const(a):
        v = _const_value(a)
        return a.graph.constant(float(v.ravel() @ v.ravel()))
    return a.graph._add_node(OpKind.SUMSQ, (a.index,), 1, 1)


def tanh(a: ExprRef) -> ExprRef:
    return apply_unary(OpKind.TANH, a)


def sigmoid(a: ExprRef) -> ExprRef:
    return apply_unary(OpKind.SIGMOID, a)


def relu(a: ExprRef) -> ExprRef:
    return apply_unary(OpKind.RELU, a)


def exp(a: ExprRef) -> ExprRef:
    return apply_unary(OpKind.EXP, a)


def log(a: ExprRef) -> ExprRef:
    return apply_unary(OpKind.LOG, a)


def sin(a: ExprRef) -> ExprRef:
    return apply_unary(OpKind.SIN, a)


def cos(a: ExprRef) -> ExprRef:
    return apply_unary(OpKind.COS, a)


def sqrt(a: ExprRef) -> ExprRef:
    return apply_unary(OpKind.SQRT, a)


def _try_fold(kind: OpKind, *args):
    """Numerically fold a constant-only op; None when the value would be
    outside the op's domain (the error then surfaces at evaluation time
    with a node index instead)."""
    try:
        with np.errstate(all="ignore"):
            if kind is OpKind.ADD:
                out = args[0] + args[1]
            elif kind is OpKind.SUB:
                out = args[0] - args[1]
            elif kind is OpKind.MUL:
                out = args[0] * args[1]
            elif kind is OpKind.DIV:
                if np.any(args[1] == 0.0):
                    return None
                out = args[0] / args[1]
            elif kind is OpKind.NEG:
                out = -args[0]
            elif kind is OpKind.POW:
                out = args[0] ** args[1]
            elif kind is OpKind.TANH:
                out = np.tanh(args[0])
            elif kind is OpKind.SIGMOID:
                out = 1.0 / (1.0 + np.exp(-args[0]))
            elif kind is OpKind.RELU:
                out = np.maximum(args[0], 0.0)
            elif kind is OpKind.STEP:
                out = (args[0] > 0.0).astype(np.float64)
            elif kind is OpKind.EXP:
                out = np.exp(args[0])
            elif kind is OpKind.LOG:
                if np.any(args[0] <= 0.0):
                    return None
                out = np.log(args[0])
            elif kind is OpKind.SIN:
                out = np.sin(args[0])
            elif kind is OpKind.COS:
                out = np.cos(args[0])
            elif kind is OpKind.SQRT:
                if np.any(args[0] < 0.0):
                    return None
                out = np.sqrt(args[0])
            else:
                return None
    except FloatingPointError:  # pragma: no cover - errstate ignores
        return None
    if not np.all(np.isfinite(out)):
        return None
    return out


# ---------------------------------------------------------------------------
# Reverse-mode differentiation
# ---------------------------------------------------------------------------

def _b_add(a: ExprRef, b: ExprRef) -> ExprRef:
    """Add with structural-zero short circuits (adjoint accumulation only)."""
    if _is_zero(a) and a.shape in (b.shape, (1, 1)):
        return b
    if _is_zero(b) and b.shape in (a.shape, (1, 1)):
        return a
    return apply_binary(OpKind.ADD, a, b)


def _b_mul(a: ExprRef, b: ExprRef) -> ExprRef:
    g = a.graph
    sa, sb = a.shape, b.shape
    out = sb if sa == (1, 1) else sa
    if _is_zero(a) or _is_zero(b):
        return g.constant(np.zeros(out))
    if _is_one_scalar(a):
        return b
    if _is_one_scalar(b):
        return a
    return apply_binary(OpKind.MUL, a, b)


def _b_matmul(a: ExprRef, b: ExprRef) -> ExprRef:
    if _is_zero(a) or _is_zero(b):
        return a.graph.constant(np.zeros((a.shape[0], b.shape[1])))
    return matmul(a, b)


def _b_neg(a: ExprRef) -> ExprRef:
    if _is_zero(a):
        return a
    return apply_unary(OpKind.NEG, a)


def _sum_entries(e: ExprRef) -> ExprRef:
    """Reduce a matrix expression to the (1,1) sum of its entries."""
    g = e.graph
    r, c = e.shape
    if (r, c) == (1, 1):
        return e
    out = e
    if r > 1:
        out = _b_matmul(g.constant(np.ones((1, r))), out)
    if c > 1:
        out = _b_matmul(out, g.constant(np.ones((c, 1))))
    return out


def _reduce_to(e: ExprRef, shape: tuple[int, int]) -> ExprRef:
    """Sum-reduce an adjoint contribution onto a broadcast operand's shape."""
    if e.shape == shape:
        return e
    if shape == (1, 1):
        return _sum_entries(e)
    raise ShapeError(f"cannot reduce adjoint of shape {e.shape} to {shape}")


def _backward(graph: ExprGraph, root: int, seed: ExprRef, wrt: frozenset[int]) -> dict[int, ExprRef]:
    """Propagate the adjoint `seed` from node `root` down to the symbols in
    `wrt`, returning adjoint expressions for those that are reached.

    Only ancestors of `root` that can reach a target symbol are visited;
    structurally-zero adjoints are dropped as soon as they appear.
    """
    nodes = graph._nodes

    # Which ancestors of root depend on a target symbol (iterative DFS).
    depends: dict[int, bool] = {}
    stack = [root]
    while stack:
        i = stack[-1]
        if i in depends:
            stack.pop()
            continue
        node = nodes[i]
        if node.op is OpKind.SYMBOL or node.op is OpKind.CONSTANT:
            depends[i] = i in wrt
            stack.pop()
            continue
        missing = [o for o in node.operands if o not in depends]
        if missing:
            stack.extend(missing)
            continue
        depends[i] = any(depends[o] for o in node.operands)
        stack.pop()

    adjoints: dict[int, ExprRef] = {}
    result: dict[int, ExprRef] = {}
    if not depends.get(root, False):
        return result

    pending: list[int] = []
    adjoints[root] = seed
    heapq.heappush(pending, -root)
    processed: set[int] = set()

    def accumulate(operand: int, contrib: ExprRef):
        if not depends.get(operand, False):
            return
        if _is_zero(contrib):
            return
        if contrib.shape != (nodes[operand].rows, nodes[operand].cols):
            contrib = _reduce_to(contrib, (nodes[operand].rows, nodes[operand].cols))
        if operand in adjoints:
            adjoints[operand] = _b_add(adjoints[operand], contrib)
        else:
            adjoints[operand] = contrib
            heapq.heappush(pending, -operand)

    while pending:
        i = -heapq.heappop(pending)
        if i in processed:
            continue
        processed.add(i)
        node = nodes[i]
        adj = adjoints[i]
        if node.op is OpKind.SYMBOL:
            if i in wrt:
                result[i] = adj
            continue
        if _is_zero(adj):
            continue
        self_ref = ExprRef(graph, i)
        op = node.op
        ops = node.operands
        if op is OpKind.ADD:
            accumulate(ops[0], adj)
            accumulate(ops[1], adj)
        elif op is OpKind.SUB:
            accumulate(ops[0], adj)
            accumulate(ops[1], _b_neg(adj))
        elif op is OpKind.MUL:
            a, b = ExprRef(graph, ops[0]), ExprRef(graph, ops[1])
            accumulate(ops[0], _b_mul(adj, b))
            accumulate(ops[1], _b_mul(adj, a))
        elif op is OpKind.DIV:
            a, b = ExprRef(graph, ops[0]), ExprRef(graph, ops[1])
            accumulate(ops[0], apply_binary(OpKind.DIV, adj, b))
            accumulate(
                ops[1],
                _b_neg(_b_mul(adj, apply_binary(OpKind.DIV, a, _b_mul(b, b)))),
            )
        elif op is OpKind.NEG:
            accumulate(ops[0], _b_neg(adj))
        elif op is OpKind.POW:
            a = ExprRef(graph, ops[0])
            p = node.payload
            if p == 1.0:
                accumulate(ops[0], adj)
            else:
                factor = _b_mul(graph.constant(p), _power_simplified(a, p - 1.0))
                accumulate(ops[0], _b_mul(adj, factor))
        elif op is OpKind.MATMUL:
            a, b = ExprRef(graph, ops[0]), ExprRef(graph, ops[1])
            accumulate(ops[0], _b_matmul(adj, transpose(b)))
            accumulate(ops[1], _b_matmul(transpose(a), adj))
        elif op is OpKind.TRANSPOSE:
            accumulate(ops[0], transpose(adj))
        elif op is OpKind.CONCAT:
            row = 0
            adj_const = _const_value(adj) if _is_const(adj) else None
            for o in ops:
                h = nodes[o].rows
                if adj_const is not None:
                    piece = graph.constant(adj_const[row:row + h, :])
                else:
                    sel = np.zeros((h, node.rows))
                    sel[np.arange(h), row + np.arange(h)] = 1.0
                    piece = _b_matmul(graph.constant(sel), adj)
                accumulate(o, piece)
                row += h
        elif op is OpKind.TANH:
            d = apply_binary(
                OpKind.SUB, graph.constant(1.0), _b_mul(self_ref, self_ref)
            )
            accumulate(ops[0], _b_mul(adj, d))
        elif op is OpKind.SIGMOID:
            one = graph.constant(1.0)
            d = _b_mul(self_ref, apply_binary(OpKind.SUB, one, self_ref))
            accumulate(ops[0], _b_mul(adj, d))
        elif op is OpKind.RELU:
            a = ExprRef(graph, ops[0])
            accumulate(ops[0], _b_mul(adj, apply_unary(OpKind.STEP, a)))
        elif op is OpKind.STEP:
            pass  # derivative fixed to zero everywhere
        elif op is OpKind.EXP:
            accumulate(ops[0], _b_mul(adj, self_ref))
        elif op is OpKind.LOG:
            a = ExprRef(graph, ops[0])
            accumulate(ops[0], apply_binary(OpKind.DIV, adj, a))
        elif op is OpKind.SIN:
            a = ExprRef(graph, ops[0])
            accumulate(ops[0], _b_mul(adj, apply_unary(OpKind.COS, a)))
        elif op is OpKind.COS:
            a = ExprRef(graph, ops[0])
            accumulate(ops[0], _b_neg(_b_mul(adj, apply_unary(OpKind.SIN, a))))
        elif op is OpKind.SQRT:
            two = graph.constant(2.0)
            accumulate(
                ops[0], apply_binary(OpKind.DIV, adj, _b_mul(two, self_ref))
            )
        elif op is OpKind.SUMSQ:
            a = ExprRef(graph, ops[0])
            accumulate(ops[0], _b_mul(_b_mul(graph.constant(2.0), adj), a))
        else:  # pragma: no cover - closed op set
            raise GraphError(f"no derivative rule for {op}")
    return result


def _power_simplified(a: ExprRef, p: float) -> ExprRef:
    if p == 0.0:
        return a.graph.constant(np.ones(a.shape))
    if p == 1.0:
        return a
    return power(a, p)


def jacobian(f: ExprRef, x: ExprRef) -> ExprRef:
    """Symbolic Jacobian of a column vector `f` w.r.t. a column symbol `x`.

    Entry (i, j) is the partial derivative of f_i with respect to x_j; the
    rectifier's kink uses subgradient 0.
    """
    g = _same_graph(f, x)
    m, fc = f.shape
    if fc != 1:
        raise ShapeError(f"jacobian target must be a column vector, got {f.shape}")
    if x.op is not OpKind.SYMBOL:
        raise GraphError("jacobian variable must be a symbol")
    n, xc = x.shape
    if xc != 1:
        raise ShapeError(f"jacobian variable must be a column vector, got {x.shape}")
    wrt = frozenset({x.index})
    rows = []
    for i in range(m):
        seed_vec = np.zeros((m, 1))
        seed_vec[i, 0] = 1.0
        adj = _backward(g, f.index, g.constant(seed_vec), wrt)
        if x.index in adj:
            rows.append(transpose(adj[x.index]))
        else:
            rows.append(g.constant(np.zeros((1, n))))
    return concat(rows)


def hessian(f: ExprRef, x: ExprRef) -> tuple[ExprRef, ExprRef]:
    """Symbolic Hessian and gradient of a scalar `f` w.r.t. column symbol `x`."""
    if f.shape != (1, 1):
        raise ShapeError(f"hessian target must be scalar, got {f.shape}")
    grad = transpose(jacobian(f, x))
    hess = jacobian(grad, x)
    return hess, grad


def gradients(f: ExprRef, wrt: Sequence[ExprRef]) -> list[ExprRef]:
    """Adjoints of a scalar `f` w.r.t. symbols of any shape.

    Returns one expression per requested symbol, shaped like the symbol;
    symbols that `f` does not depend on get a zero constant.
    """
    if f.shape != (1, 1):
        raise ShapeError(f"gradients target must be scalar, got {f.shape}")
    g = f.graph
    for s in wrt:
        if s.graph is not g:
            raise GraphError("operands belong to different graphs")
        if s.op is not OpKind.SYMBOL:
            raise GraphError("gradients targets must be symbols")
    ids = frozenset(s.index for s in wrt)
    adj = _backward(g, f.index, g.constant(1.0), ids)
    return [adj.get(s.index, g.constant(np.zeros(s.shape))) for s in wrt]


# ---------------------------------------------------------------------------
# Substitution
# ---------------------------------------------------------------------------

def substitute(e: ExprRef, bindings: Mapping[ExprRef, ExprRef]) -> ExprRef:
    """Replace symbols in `e` by other expressions of the same shape.

    Unbound symbols are left untouched; subtrees that reference no bound
    symbol are reused as-is, so empty bindings return `e` itself.
    """
    g = e.graph
    binding_ids: dict[int, int] = {}
    for sym, repl in bindings.items():
        if sym.graph is not g or repl.graph is not g:
            raise GraphError("substitute bindings must live in the same graph")
        if sym.op is not OpKind.SYMBOL:
            raise GraphError("substitute keys must be symbols")
        if sym.shape != repl.shape:
            raise ShapeError(
                f"substitute: symbol '{sym.name}' has shape {sym.shape}, "
                f"replacement has {repl.shape}"
            )
        binding_ids[sym.index] = repl.index
    if not binding_ids:
        return e

    nodes = g._nodes
    mapped: dict[int, int] = {}

    def rebuild(i: int) -> int:
        cached = mapped.get(i)
        if cached is not None:
            return cached
        node = nodes[i]
        if node.op is OpKind.SYMBOL:
            out = binding_ids.get(i, i)
        elif node.op is OpKind.CONSTANT:
            out = i
        else:
            new_ops = [rebuild(o) for o in node.operands]
            if new_ops == list(node.operands):
                out = i
            else:
                out = g._add_node(
                    node.op, tuple(new_ops), node.rows, node.cols,
                    payload=node.payload,
                ).index
        mapped[i] = out
        return out

    # Ascending-index pre-pass: operands are rebuilt before their consumers,
    # so the recursion in rebuild() never goes more than one level deep.
    seen = set()
    stack = [e.index]
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        stack.extend(nodes[i].operands)
    for i in sorted(seen):
        rebuild(i)
    return ExprRef(g, rebuild(e.index))


# ---------------------------------------------------------------------------
# Functions and evaluation
# ---------------------------------------------------------------------------

_FUNCTION_NAMES: set[str] = set()
_FUNCTION_LOCK = threading.Lock()
_AUTO_NAME = itertools.count()


def reachable_symbols(graph: ExprGraph, roots: Iterable[int]) -> set[int]:
    nodes = graph._nodes
    seen: set[int] = set()
    out: set[int] = set()
    stack = list(roots)
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        node = nodes[i]
        if node.op is OpKind.SYMBOL:
            out.add(i)
        stack.extend(node.operands)
    return out


class SymFunction:
    """A finalized mapping from symbol inputs to expression outputs.

    Every symbol reachable from the outputs must be listed as an input, and
    the function name is unique within the process.  Instances are immutable
    and safe for concurrent evaluation.
    """

    def __init__(self, inputs: Sequence[ExprRef], outputs: Sequence[ExprRef], name: str | None = None):
        inputs = list(inputs)
        outputs = list(outputs)
        if not outputs:
            raise GraphError("function needs at least one output")
        graph = _same_graph(*(inputs + outputs))
        for ref in inputs:
            if ref.op is not OpKind.SYMBOL:
                raise GraphError("function inputs must be symbols")
        if len({r.index for r in inputs}) != len(inputs):
            raise GraphError("function inputs must be distinct symbols")
        input_ids = {r.index for r in inputs}
        free = reachable_symbols(graph, [o.index for o in outputs]) - input_ids
        if free:
            names = sorted(graph._nodes[i].name for i in free)
            raise GraphError(
                "outputs depend on symbols not listed as inputs: "
                + ", ".join(f"'{n}'" for n in names)
            )
        if name is None:
            name = f"fn{next(_AUTO_NAME)}"
        if not name.isidentifier():
            raise GraphError(f"function name '{name}' is not an identifier")
        with _FUNCTION_LOCK:
            if name in _FUNCTION_NAMES:
                raise GraphError(f"function name '{name}' already in use")
            _FUNCTION_NAMES.add(name)
        self.name = name
        self.graph = graph
        self.inputs = tuple(inputs)
        self.outputs = tuple(outputs)
        self._schedule = self._build_schedule()

    def _build_schedule(self):
        nodes = self.graph._nodes
        needed: set[int] = set()
        stack = [o.index for o in self.outputs]
        while stack:
            i = stack.pop()
            if i in needed:
                continue
            needed.add(i)
            stack.extend(nodes[i].operands)
        schedule = []
        for i in sorted(needed):
            node = nodes[i]
            if node.op is OpKind.SYMBOL:
                continue
            schedule.append((i, node.op, node.operands, node.payload))
        return tuple(schedule)

    @property
    def input_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(r.shape for r in self.inputs)

    @property
    def output_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(r.shape for r in self.outputs)

    def __call__(self, *inputs):
        return evaluate(self, list(inputs))

    def __repr__(self):
        return (
            f"<SymFunction {self.name}: {len(self.inputs)} inputs -> "
            f"{len(self.outputs)} outputs, {len(self._schedule)} ops>"
        )


def _coerce_input(value, shape: tuple[int, int], pos: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        if shape[1] == 1 and arr.shape[0] == shape[0]:
            arr = arr.reshape(-1, 1)
        elif shape[0] == 1 and arr.shape[0] == shape[1]:
            arr = arr.reshape(1, -1)
    if arr.shape != shape:
        raise EvalError(
            f"input {pos} has shape {tuple(arr.shape)}, expected {shape}"
        )
    return arr


def evaluate(f: SymFunction, inputs: Sequence) -> list[np.ndarray]:
    """Deterministic double-precision forward interpretation of `f`."""
    if len(inputs) != len(f.inputs):
        raise EvalError(f"expected {len(f.inputs)} inputs, got {len(inputs)}")
    values: list = [None] * len(f.graph)
    for pos, (ref, val) in enumerate(zip(f.inputs, inputs)):
        values[ref.index] = _coerce_input(val, ref.shape, pos)

    K = OpKind
    # IEEE semantics: overflow propagates as inf/nan and is caught by the
    # callers' finiteness checks; only domain errors raise here.
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_schedule(f, values, K)


def _run_schedule(f: SymFunction, values: list, K) -> list[np.ndarray]:
    for idx, op, ops, payload in f._schedule:
        if op is K.CONSTANT:
            values[idx] = payload
        elif op is K.ADD:
            values[idx] = values[ops[0]] + values[ops[1]]
        elif op is K.SUB:
            values[idx] = values[ops[0]] - values[ops[1]]
        elif op is K.MUL:
            values[idx] = values[ops[0]] * values[ops[1]]
        elif op is K.MATMUL:
            values[idx] = values[ops[0]] @ values[ops[1]]
        elif op is K.DIV:
            den = values[ops[1]]
            if np.any(den == 0.0):
                raise EvalError("division by zero", node=idx)
            values[idx] = values[ops[0]] / den
        elif op is K.NEG:
            values[idx] = -values[ops[0]]
        elif op is K.POW:
            values[idx] = values[ops[0]] ** payload
        elif op is K.TRANSPOSE:
            values[idx] = values[ops[0]].T
        elif op is K.CONCAT:
            values[idx] = np.vstack([values[o] for o in ops])
        elif op is K.TANH:
            values[idx] = np.tanh(values[ops[0]])
        elif op is K.SIGMOID:
            with np.errstate(over="ignore"):
                values[idx] = 1.0 / (1.0 + np.exp(-values[ops[0]]))
        elif op is K.RELU:
            values[idx] = np.maximum(values[ops[0]], 0.0)
        elif op is K.STEP:
            values[idx] = (values[ops[0]] > 0.0).astype(np.float64)
        elif op is K.EXP:
            with np.errstate(over="ignore"):
                values[idx] = np.exp(values[ops[0]])
        elif op is K.LOG:
            v = values[ops[0]]
            if np.any(v <= 0.0):
                raise EvalError("log of non-positive value", node=idx)
            values[idx] = np.log(v)
        elif op is K.SIN:
            values[idx] = np.sin(values[ops[0]])
        elif op is K.COS:
            values[idx] = np.cos(values[ops[0]])
        elif op is K.SQRT:
            v = values[ops[0]]
            if np.any(v < 0.0):
                raise EvalError("sqrt of negative value", node=idx)
            values[idx] = np.sqrt(v)
        elif op is K.SUMSQ:
            v = values[ops[0]].ravel()
            values[idx] = np.array([[v @ v]])
        else:  # pragma: no cover - closed op set
            raise EvalError(f"cannot evaluate op {op}", node=idx)
    return [np.array(values[o.index], copy=True) for o in f.outputs]
