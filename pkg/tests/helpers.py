"""Shared test utilities: finite-difference oracles, random expression and
network generators, and the closed-form minimum-snap solution.

Everything here is deliberately independent of the code paths it checks:
finite differences replace symbolic derivatives, the snap QP is solved as
one linear system, and random structures use their own seeded generators.
"""

from __future__ import annotations

import numpy as np

import neuropt.learned as ln
import neuropt.symgraph as sg
from neuropt.cases.minsnap import (
    DIMS,
    N_COEFF,
    TrajParams,
    _scaled_axis_matrix,
)


def fd_jacobian(fn: sg.SymFunction, x0: np.ndarray, h: float = 1e-5, output: int = 0) -> np.ndarray:
    """Central finite differences of a single-input column function."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, 1)
    m = fn.outputs[output].shape[0]
    n = x0.shape[0]
    out = np.zeros((m, n))
    for j in range(n):
        e = np.zeros_like(x0)
        e[j, 0] = h
        fp = sg.evaluate(fn, [x0 + e])[output]
        fm = sg.evaluate(fn, [x0 - e])[output]
        out[:, j] = ((fp - fm) / (2.0 * h)).ravel()
    return out


def rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    """Max elementwise error relative to max(1, |exact|)."""
    denom = np.maximum(1.0, np.abs(exact))
    return float(np.max(np.abs(approx - exact) / denom))


# ---------------------------------------------------------------------------
# Random expressions
# ---------------------------------------------------------------------------

def random_expression(rng: np.random.Generator, n_vars: int | None = None):
    """A random smooth scalar expression over one column-vector symbol.

    Draws from the smooth op set (no rectifier kinks) with shapes that stay
    small; returns (function, symbol dimension).  Values stay tame for
    inputs in [-2, 2] because exp arguments are pre-squashed.
    """
    n = int(rng.integers(2, 5)) if n_vars is None else n_vars
    g = sg.ExprGraph()
    x = g.symbol("x", n, 1)

    def rand_const(rows, cols):
        return g.constant(rng.uniform(-1.5, 1.5, size=(rows, cols)))

    pool = [x]
    for _ in range(int(rng.integers(3, 9))):
        kind = rng.integers(0, 8)
        a = pool[int(rng.integers(0, len(pool)))]
        if kind == 0:
            pool.append(a + rand_const(*a.shape))
        elif kind == 1:
            pool.append(a * rand_const(*a.shape))
        elif kind == 2:
            rows = int(rng.integers(1, 4))
            pool.append(sg.matmul(rand_const(rows, a.shape[0]), a))
        elif kind == 3:
            pool.append(sg.tanh(a))
        elif kind == 4:
            pool.append(sg.sigmoid(a))
        elif kind == 5:
            pool.append(sg.sin(a) + sg.cos(a))
        elif kind == 6:
            pool.append(sg.exp(sg.tanh(a) * 0.5))
        else:
            b = pool[int(rng.integers(0, len(pool)))]
            if b.shape == a.shape:
                pool.append(a * b)
            else:
                pool.append(sg.sumsq(a) * b)
    total = None
    for e in pool[1:]:
        term = sg.sumsq(e)
        total = term if total is None else total + term
    total = sg.tanh(total * 0.1)  # keep the scalar output well-scaled
    return sg.SymFunction([x], [total]), n


def random_mlp_spec(
    rng: np.random.Generator,
    in_features: int | None = None,
    out_features: int | None = None,
    max_hidden_layers: int = 3,
    max_width: int = 64,
    activation: ln.ActivationKind = ln.ActivationKind.TANH,
) -> ln.MlpSpec:
    d_in = int(rng.integers(1, 5)) if in_features is None else in_features
    d_out = int(rng.integers(1, 4)) if out_features is None else out_features
    depth = int(rng.integers(1, max_hidden_layers + 1))
    widths = [int(rng.integers(2, max_width + 1)) for _ in range(depth)]
    sizes = [d_in, *widths, d_out]
    pairs = []
    for k in range(len(sizes) - 1):
        fan_in = sizes[k]
        w = rng.uniform(-1, 1, size=(sizes[k + 1], fan_in)) / np.sqrt(fan_in)
        b = rng.uniform(-0.3, 0.3, size=sizes[k + 1])
        pairs.append((w, b))
    return ln.make_mlp_spec(pairs, hidden_activation=activation)


# ---------------------------------------------------------------------------
# Closed-form minimum-snap oracle
# ---------------------------------------------------------------------------

def min_snap_qp_solution(tp: TrajParams) -> np.ndarray:
    """Solve the equality-constrained snap QP as one KKT linear system.

    Assembles the Gram matrix of fourth-derivative rows on the sample grid
    and the boundary-condition rows directly (same normalized-time basis,
    built independently of the NLP path) and returns the plain-basis
    coefficient matrix (10, 3).
    """
    rows = np.vstack([_scaled_axis_matrix(tp, t, 4) for t in tp.grid])
    quad = 2.0 * rows.T @ rows
    bc = np.vstack([
        _scaled_axis_matrix(tp, 0.0, 0),
        _scaled_axis_matrix(tp, 0.0, 1),
        _scaled_axis_matrix(tp, 0.0, 2),
        _scaled_axis_matrix(tp, tp.total_time, 0),
        _scaled_axis_matrix(tp, tp.total_time, 1),
        _scaled_axis_matrix(tp, tp.total_time, 2),
    ])
    target = np.concatenate([
        np.asarray(tp.p0, dtype=np.float64), np.zeros(3), np.zeros(3),
        np.asarray(tp.pf, dtype=np.float64), np.zeros(3), np.zeros(3),
    ])
    n = N_COEFF * DIMS
    m = bc.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = quad
    kkt[:n, n:] = bc.T
    kkt[n:, :n] = bc
    rhs = np.concatenate([np.zeros(n), target])
    sol = np.linalg.solve(kkt, rhs)
    scaled = sol[:n]
    coeffs = np.zeros((N_COEFF, DIMS))
    for a in range(DIMS):
        for i in range(N_COEFF):
            coeffs[i, a] = scaled[a * N_COEFF + i] / tp.total_time**i
    return coeffs
