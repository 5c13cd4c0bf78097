"""Nonlinear programs over symbolic expressions, solved by a primal-dual
interior-point method.

Problem form: minimize f(x) subject to cl <= g(x) <= cu and xl <= x <= xu,
where equal entries of (cl, cu) denote equality constraints.  Assembling a
problem builds the symbolic gradient, constraint Jacobian, and Lagrangian
Hessian once; each solver iteration only evaluates them numerically.

The algorithm is a monotone barrier scheme: ranged inequalities get one
slack per finite side, each barrier subproblem is solved by Newton steps on
the perturbed KKT system (dense symmetric solve with inertia-correcting
regularization of the Hessian block), step lengths obey the
fraction-to-boundary rule, and progress is enforced by backtracking on an
l1 merit function.  The barrier weight follows
mu <- max(mu_min, min(kappa_mu * mu, mu ** theta_mu)) whenever the scaled
optimality error of the current subproblem drops below 10 * mu.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import symgraph as sg


class ProblemError(ValueError):
    """Raised for invalid problem definitions."""


_REG_CAP = 1e10
_ARMIJO_C = 1e-4
_BACKTRACK = 0.5


class SolveStatus(Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    DIVERGED = "diverged"
    RESTORATION_FAILED = "restoration_failed"


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 500
    mu_init: float = 0.1
    mu_min: float | None = None  # defaults to tol / 10
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    tau_min: float = 0.99
    reg_init: float = 1e-8
    log_fn: Callable[[str], None] | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ProblemError("tol must be positive")
        if self.max_iter < 1:
            raise ProblemError("max_iter must be at least 1")
        if not self.mu_init > 0:
            raise ProblemError("mu_init must be positive")
        if self.mu_min is not None and not self.mu_min > 0:
            raise ProblemError("mu_min must be positive")
        if not 0.0 < self.kappa_mu < 1.0:
            raise ProblemError("kappa_mu must lie in (0, 1)")
        if not 1.0 < self.theta_mu < 2.0:
            raise ProblemError("theta_mu must lie in (1, 2)")
        if not 0.0 < self.tau_min < 1.0:
            raise ProblemError("tau_min must lie in (0, 1)")
        if not self.reg_init > 0:
            raise ProblemError("reg_init must be positive")

    @property
    def effective_mu_min(self) -> float:
        return self.tol / 10.0 if self.mu_min is None else self.mu_min


@dataclass
class IterationRecord:
    k: int
    mu: float
    objective: float
    violation: float
    kkt: float
    step: float
    merit: float
    nu: float
    x: np.ndarray


@dataclass
class Solution:
    status: SolveStatus
    x: np.ndarray
    constraint_duals: np.ndarray
    bound_dual_lower: np.ndarray
    bound_dual_upper: np.ndarray
    iterations: int
    kkt_error: float
    objective_value: float
    trace: list[IterationRecord] = field(default_factory=list)
    message: str = ""

    @property
    def bound_duals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.bound_dual_lower, self.bound_dual_upper


class NlpProblem:
    """Validated problem with cached symbolic derivatives.

    Immutable after :func:`assemble`; distinct problems may be solved
    concurrently.
    """

    def __init__(self, x, objective, constraints, cl, cu, xl, xu, x_init,
                 f_fn, grad_fn, cons_fn, jac_fn, hess_fn, has_lam):
        self.x = x
        self.objective = objective
        self.constraints = constraints
        self.constraint_lower = cl
        self.constraint_upper = cu
        self.x_lower = xl
        self.x_upper = xu
        self.x_init = x_init
        self._f_fn = f_fn
        self._grad_fn = grad_fn
        self._cons_fn = cons_fn
        self._jac_fn = jac_fn
        self._hess_fn = hess_fn
        self._has_lam = has_lam

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return 0 if self.constraints is None else self.constraints.shape[0]

    # Numeric evaluation helpers -------------------------------------------------

    def eval_objective(self, x: np.ndarray) -> float:
        return float(self._f_fn(x.reshape(-1, 1))[0][0, 0])

    def eval_gradient(self, x: np.ndarray) -> np.ndarray:
        return self._grad_fn(x.reshape(-1, 1))[0].ravel()

    def eval_constraints(self, x: np.ndarray) -> np.ndarray:
        if self.m == 0:
            return np.zeros(0)
        return self._cons_fn(x.reshape(-1, 1))[0].ravel()

    def eval_jacobian(self, x: np.ndarray) -> np.ndarray:
        if self.m == 0:
            return np.zeros((0, self.n))
        return self._jac_fn(x.reshape(-1, 1))[0]

    def eval_lagrangian_hessian(self, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
        if self._has_lam:
            h = self._hess_fn(x.reshape(-1, 1), lam.reshape(-1, 1))[0]
        else:
            h = self._hess_fn(x.reshape(-1, 1))[0]
        return 0.5 * (h + h.T)

    def violation(self, x: np.ndarray) -> float:
        """Max violation of constraint and variable bounds at x."""
        worst = 0.0
        if self.m:
            gv = self.eval_constraints(x)
            worst = max(
                worst,
                float(np.max(np.maximum(self.constraint_lower - gv, 0.0), initial=0.0)),
                float(np.max(np.maximum(gv - self.constraint_upper, 0.0), initial=0.0)),
            )
        worst = max(
            worst,
            float(np.max(np.maximum(self.x_lower - x, 0.0), initial=0.0)),
            float(np.max(np.maximum(x - self.x_upper, 0.0), initial=0.0)),
        )
        return worst


def clip_to_interior(x0: np.ndarray, xl: np.ndarray, xu: np.ndarray) -> np.ndarray:
    """Move components sitting on or outside their bounds strictly inside.

    The margin is 1e-2 times the bound range when both sides are finite and
    1e-2 otherwise.
    """
    x = np.array(x0, dtype=np.float64)
    for j in range(x.shape[0]):
        lo, hi = xl[j], xu[j]
        both = math.isfinite(lo) and math.isfinite(hi)
        margin = 1e-2 * (hi - lo) if both else 1e-2
        if math.isfinite(lo) and x[j] <= lo:
            x[j] = lo + margin
        if math.isfinite(hi) and x[j] >= hi:
            x[j] = hi - margin
        if both and not (lo < x[j] < hi):
            x[j] = 0.5 * (lo + hi)
    return x


def assemble(
    x: sg.ExprRef,
    objective: sg.ExprRef,
    constraints: sg.ExprRef | None = None,
    constraint_lower: Sequence[float] | None = None,
    constraint_upper: Sequence[float] | None = None,
    x_lower: Sequence[float] | None = None,
    x_upper: Sequence[float] | None = None,
    x_init: Sequence[float] | None = None,
) -> NlpProblem:
    """Validate a problem and cache its symbolic derivatives.

    Builds the objective gradient, the constraint Jacobian, and the
    Lagrangian Hessian (with a fresh multiplier symbol) exactly once.
    """
    if x.op is not sg.OpKind.SYMBOL or x.shape[1] != 1:
        raise ProblemError("decision variable must be a column-vector symbol")
    if objective.shape != (1, 1):
        raise ProblemError(f"objective must be scalar, got shape {objective.shape}")
    n = x.shape[0]
    g = x.graph

    if constraints is not None and constraints.shape[0] == 0:
        constraints = None
    m = 0 if constraints is None else constraints.shape[0]
    if constraints is not None:
        if constraints.shape[1] != 1:
            raise ProblemError(
                f"constraints must form a column vector, got shape {constraints.shape}"
            )
        if constraints.graph is not g:
            raise ProblemError("constraints and variable live in different graphs")

    def _bound_vec(v, length, default, label):
        if v is None:
            return np.full(length, default, dtype=np.float64)
        arr = np.asarray(v, dtype=np.float64).reshape(-1)
        if arr.shape[0] != length:
            raise ProblemError(f"{label} must have length {length}, got {arr.shape[0]}")
        return arr

    cl = _bound_vec(constraint_lower, m, -np.inf, "constraint_lower")
    cu = _bound_vec(constraint_upper, m, np.inf, "constraint_upper")
    xl = _bound_vec(x_lower, n, -np.inf, "x_lower")
    xu = _bound_vec(x_upper, n, np.inf, "x_upper")
    if np.any(cl > cu):
        raise ProblemError("constraint_lower exceeds constraint_upper")
    eq = cl == cu
    if np.any(eq & ~np.isfinite(cl)):
        raise ProblemError("equality constraints need finite bounds")
    if np.any(xl > xu):
        raise ProblemError("x_lower exceeds x_upper")
    if np.any((xl == xu) & np.isfinite(xl)):
        j = int(np.argmax((xl == xu) & np.isfinite(xl)))
        raise ProblemError(
            f"variable {j} has equal lower and upper bounds; the barrier needs "
            "an interior - use an equality constraint instead"
        )

    raw_init = _bound_vec(x_init, n, 0.0, "x_init")
    if not np.all(np.isfinite(raw_init)):
        raise ProblemError("x_init must be finite")
    x0 = clip_to_interior(raw_init, xl, xu)

    outputs = [objective] if constraints is None else [objective, constraints]
    try:
        probe = sg.SymFunction([x], outputs)
    except sg.GraphError as exc:
        raise ProblemError(str(exc)) from None
    f_fn = sg.SymFunction([x], [objective])
    grad = sg.transpose(sg.jacobian(objective, x))
    grad_fn = sg.SymFunction([x], [grad])
    if constraints is not None:
        cons_fn = sg.SymFunction([x], [constraints])
        jac = sg.jacobian(constraints, x)
        jac_fn = sg.SymFunction([x], [jac])
        lam_name = "_mult"
        k = 0
        while f"{lam_name}{k}" in g._symbol_ids:
            k += 1
        lam = g.symbol(f"{lam_name}{k}", m, 1)
        lagrangian = objective + sg.matmul(sg.transpose(lam), constraints)
        hess, _ = sg.hessian(lagrangian, x)
        hess_fn = sg.SymFunction([x, lam], [hess])
        has_lam = True
    else:
        cons_fn = None
        jac_fn = None
        hess, _ = sg.hessian(objective, x)
        hess_fn = sg.SymFunction([x], [hess])
        has_lam = False
    del probe
    return NlpProblem(
        x, objective, constraints, cl, cu, xl, xu, x0,
        f_fn, grad_fn, cons_fn, jac_fn, hess_fn, has_lam,
    )


# ---------------------------------------------------------------------------
# KKT error
# ---------------------------------------------------------------------------

@dataclass
class Iterate:
    """A primal-dual point: primal x, per-side slacks, and duals.

    ``z_lower`` / ``z_upper`` are full-length bound duals (zero where the
    bound is infinite); ``v_lower`` / ``v_upper`` are the per-side
    inequality duals; ``y`` holds equality multipliers.
    """

    x: np.ndarray
    s_lower: np.ndarray
    s_upper: np.ndarray
    y: np.ndarray
    v_lower: np.ndarray
    v_upper: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray


class _Structure:
    """Index bookkeeping shared by the solver and kkt_error."""

    def __init__(self, p: NlpProblem):
        cl, cu = p.constraint_lower, p.constraint_upper
        eq = (cl == cu) & np.isfinite(cl)
        ineq = ~eq
        self.eq_idx = np.flatnonzero(eq)
        self.low_idx = np.flatnonzero(ineq & np.isfinite(cl))
        self.up_idx = np.flatnonzero(ineq & np.isfinite(cu))
        self.mask_xl = np.isfinite(p.x_lower)
        self.mask_xu = np.isfinite(p.x_upper)
        self.n = p.n
        self.m = p.m

    @property
    def n_eq(self):
        return self.eq_idx.shape[0]

    @property
    def n_low(self):
        return self.low_idx.shape[0]

    @property
    def n_up(self):
        return self.up_idx.shape[0]


def make_iterate(
    p: NlpProblem,
    x: Sequence[float],
    y: Sequence[float] | None = None,
    v_lower: Sequence[float] | None = None,
    v_upper: Sequence[float] | None = None,
    z_lower: Sequence[float] | None = None,
    z_upper: Sequence[float] | None = None,
) -> Iterate:
    """Build an Iterate at primal point x; slacks come from g(x), missing
    duals default to zero."""
    st = _Structure(p)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    gv = p.eval_constraints(x)
    sL = gv[st.low_idx] - p.constraint_lower[st.low_idx]
    sU = p.constraint_upper[st.up_idx] - gv[st.up_idx]

    def _vec(v, length):
        return np.zeros(length) if v is None else np.asarray(v, dtype=np.float64).reshape(-1)

    return Iterate(
        x=x,
        s_lower=sL,
        s_upper=sU,
        y=_vec(y, st.n_eq),
        v_lower=_vec(v_lower, st.n_low),
        v_upper=_vec(v_upper, st.n_up),
        z_lower=_vec(z_lower, p.n),
        z_upper=_vec(z_upper, p.n),
    )


def _net_multiplier(st: _Structure, it: Iterate) -> np.ndarray:
    lam = np.zeros(st.m)
    lam[st.eq_idx] = it.y
    lam[st.low_idx] -= it.v_lower
    lam[st.up_idx] += it.v_upper
    return lam


def _kkt_parts(p: NlpProblem, st: _Structure, it: Iterate, mu: float,
               gv: np.ndarray, grad: np.ndarray, jac: np.ndarray):
    lam = _net_multiplier(st, it)
    r_d = grad.copy()
    if st.m:
        r_d += jac.T @ lam
    r_d -= it.z_lower
    r_d += it.z_upper
    r_eq = gv[st.eq_idx] - p.constraint_lower[st.eq_idx]
    r_low = gv[st.low_idx] - p.constraint_lower[st.low_idx] - it.s_lower
    r_up = gv[st.up_idx] - p.constraint_upper[st.up_idx] + it.s_upper
    compl = []
    if st.mask_xl.any():
        compl.append(it.z_lower[st.mask_xl] * (it.x - p.x_lower)[st.mask_xl] - mu)
    if st.mask_xu.any():
        compl.append(it.z_upper[st.mask_xu] * (p.x_upper - it.x)[st.mask_xu] - mu)
    if st.n_low:
        compl.append(it.v_lower * it.s_lower - mu)
    if st.n_up:
        compl.append(it.v_upper * it.s_upper - mu)
    compl_vec = np.concatenate(compl) if compl else np.zeros(0)
    return r_d, r_eq, r_low, r_up, compl_vec


def _dual_scale(st: _Structure, it: Iterate) -> float:
    parts = [it.y, it.v_lower, it.v_upper,
             it.z_lower[st.mask_xl], it.z_upper[st.mask_xu]]
    total = sum(float(np.abs(v).sum()) for v in parts)
    count = sum(v.shape[0] for v in parts)
    if count == 0:
        return 1.0
    return max(100.0, total / count) / 100.0


def _inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def kkt_error(p: NlpProblem, point: Iterate, mu: float) -> float:
    """Scaled optimality error of a primal-dual point for barrier weight mu.

    Maximum of dual infeasibility (scaled by max(100, mean |duals|) / 100),
    primal infeasibility, and complementarity residuals.
    """
    st = _Structure(p)
    x = point.x
    gv = p.eval_constraints(x)
    grad = p.eval_gradient(x)
    jac = p.eval_jacobian(x)
    r_d, r_eq, r_low, r_up, compl = _kkt_parts(p, st, point, mu, gv, grad, jac)
    s_d = _dual_scale(st, point)
    return max(
        _inf(r_d) / s_d, _inf(r_eq), _inf(r_low), _inf(r_up), _inf(compl)
    )


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def solve(p: NlpProblem, opts: SolverOptions | None = None) -> Solution:
    """Run the interior-point iteration from the problem's initial point."""
    opts = opts or SolverOptions()
    return _solve(p, opts, p.x_init, opts.mu_init)


def solve_warm(
    p: NlpProblem,
    x_start: Sequence[float],
    mu_init: float,
    opts: SolverOptions | None = None,
) -> Solution:
    """Solve starting from x_start with a caller-chosen initial barrier weight.

    Slack and bound duals are initialized from mu-complementarity
    (z = mu / slack), so a start inside the feasible region stays there from
    the first iteration.
    """
    opts = opts or SolverOptions()
    if not mu_init > 0:
        raise ProblemError("mu_init must be positive")
    x0 = np.asarray(x_start, dtype=np.float64).reshape(-1)
    if x0.shape[0] != p.n:
        raise ProblemError(f"x_start must have length {p.n}")
    return _solve(p, opts, clip_to_interior(x0, p.x_lower, p.x_upper), mu_init)


def _solve(p: NlpProblem, opts: SolverOptions, x0: np.ndarray, mu0: float) -> Solution:
    st = _Structure(p)
    n = p.n
    tol = opts.tol
    mu_min = opts.effective_mu_min
    log = opts.log_fn

    x = np.array(x0, dtype=np.float64)
    try:
        f_val = p.eval_objective(x)
        g_val = p.eval_constraints(x)
    except sg.EvalError as exc:
        return _failed_solution(p, x, SolveStatus.DIVERGED,
                                f"evaluation failed at the initial point: {exc}")
    if not math.isfinite(f_val) or not np.all(np.isfinite(g_val)):
        return _failed_solution(p, x, SolveStatus.DIVERGED,
                                "objective or constraints non-finite at the initial point")

    mu = mu0
    # Slacks start on the true constraint distances where those are already
    # positive, so feasible rows enter with zero slack residual; infeasible
    # rows get a unit-scale positive slack instead.
    dist_l = g_val[st.low_idx] - p.constraint_lower[st.low_idx]
    dist_u = p.constraint_upper[st.up_idx] - g_val[st.up_idx]
    sL = np.where(dist_l > 0.0, dist_l, 1e-2)
    sU = np.where(dist_u > 0.0, dist_u, 1e-2)
    dxl = x - p.x_lower
    dxu = p.x_upper - x
    it = Iterate(
        x=x,
        s_lower=sL,
        s_upper=sU,
        y=np.zeros(st.n_eq),
        v_lower=mu / sL if st.n_low else np.zeros(0),
        v_upper=mu / sU if st.n_up else np.zeros(0),
        z_lower=np.where(st.mask_xl, mu / np.where(st.mask_xl, dxl, 1.0), 0.0),
        z_upper=np.where(st.mask_xu, mu / np.where(st.mask_xu, dxu, 1.0), 0.0),
    )

    nu = 1.0
    trace: list[IterationRecord] = []
    best: tuple[float, Iterate, float] | None = None  # (score, iterate, kkt0)
    iterations = 0
    status = SolveStatus.MAX_ITERATIONS
    message = ""

    for _ in range(opts.max_iter):
        try:
            f_val = p.eval_objective(it.x)
            g_val = p.eval_constraints(it.x)
            grad = p.eval_gradient(it.x)
            jac = p.eval_jacobian(it.x)
            lam = _net_multiplier(st, it)
            hess = p.eval_lagrangian_hessian(it.x, lam)
        except sg.EvalError as exc:
            status, message = SolveStatus.DIVERGED, f"evaluation failed: {exc}"
            break
        if not (math.isfinite(f_val) and np.all(np.isfinite(g_val))
                and np.all(np.isfinite(grad)) and np.all(np.isfinite(jac))
                and np.all(np.isfinite(hess))):
            status, message = SolveStatus.DIVERGED, "non-finite derivatives"
            break

        kkt0 = _kkt_from_parts(p, st, it, 0.0, g_val, grad, jac)
        viol = p.violation(it.x)
        score = kkt0 + 1e3 * max(0.0, viol - tol)
        if best is None or score < best[0]:
            best = (score, _copy_iterate(it), kkt0)
        if kkt0 <= tol and viol <= tol:
            status = SolveStatus.CONVERGED
            break

        # Monotone barrier update: tighten mu once the subproblem is solved
        # to within 10 * mu.
        while mu > mu_min * (1 + 1e-12):
            if _kkt_from_parts(p, st, it, mu, g_val, grad, jac) > 10.0 * mu:
                break
            mu = max(mu_min, min(opts.kappa_mu * mu, mu ** opts.theta_mu))

        step = _newton_step(p, st, it, mu, hess, grad, jac, g_val, opts)
        if step is None:
            status = SolveStatus.RESTORATION_FAILED
            message = "regularization exceeded its cap without a usable step"
            break
        direction, delta_used = step

        accepted = _line_search(p, st, it, mu, f_val, g_val, grad, direction, nu, opts)
        while accepted is None:
            delta_used = opts.reg_init if delta_used == 0.0 else delta_used * 10.0
            if delta_used > _REG_CAP:
                break
            step = _newton_step(p, st, it, mu, hess, grad, jac, g_val, opts,
                                forced_delta=delta_used)
            if step is None:
                break
            direction, delta_used = step
            accepted = _line_search(p, st, it, mu, f_val, g_val, grad, direction, nu, opts)
        if accepted is None:
            status = SolveStatus.RESTORATION_FAILED
            message = "line search failed at the regularization cap"
            break

        it, alpha, nu, merit_val = accepted
        if __debug__:
            assert np.all(it.s_lower > 0.0) and np.all(it.s_upper > 0.0)
            assert np.all(it.v_lower > 0.0) and np.all(it.v_upper > 0.0)
            assert np.all(it.z_lower[st.mask_xl] > 0.0)
            assert np.all(it.z_upper[st.mask_xu] > 0.0)
        iterations += 1
        rec = IterationRecord(
            k=iterations, mu=mu, objective=p.eval_objective(it.x),
            violation=p.violation(it.x),
            kkt=_kkt_fresh(p, st, it, 0.0),
            step=alpha, merit=merit_val, nu=nu, x=it.x.copy(),
        )
        trace.append(rec)
        if log is not None:
            log(
                f"iter {rec.k:4d} | {rec.mu:9.3e} | {rec.objective:+.9e} | "
                f"{rec.violation:9.3e} | {rec.kkt:9.3e} | {rec.step:8.2e}"
            )
        if not np.all(np.isfinite(it.x)) or float(np.max(np.abs(it.x))) > 1e14:
            status, message = SolveStatus.DIVERGED, "iterates diverged"
            break

    if status is SolveStatus.CONVERGED:
        final_it, final_kkt = it, kkt0
    elif best is not None:
        final_it, final_kkt = best[1], best[2]
    else:
        final_it, final_kkt = it, float("inf")

    return Solution(
        status=status,
        x=final_it.x.copy(),
        constraint_duals=_net_multiplier(st, final_it),
        bound_dual_lower=final_it.z_lower.copy(),
        bound_dual_upper=final_it.z_upper.copy(),
        iterations=iterations,
        kkt_error=final_kkt,
        objective_value=p.eval_objective(final_it.x),
        trace=trace,
        message=message,
    )


def _copy_iterate(it: Iterate) -> Iterate:
    return Iterate(*(np.array(v, copy=True) for v in (
        it.x, it.s_lower, it.s_upper, it.y, it.v_lower, it.v_upper,
        it.z_lower, it.z_upper)))


def _failed_solution(p, x, status, message) -> Solution:
    return Solution(
        status=status,
        x=np.array(x, copy=True),
        constraint_duals=np.zeros(p.m),
        bound_dual_lower=np.zeros(p.n),
        bound_dual_upper=np.zeros(p.n),
        iterations=0,
        kkt_error=float("inf"),
        objective_value=float("nan"),
        message=message,
    )


def _kkt_from_parts(p, st, it, mu, g_val, grad, jac) -> float:
    r_d, r_eq, r_low, r_up, compl = _kkt_parts(p, st, it, mu, g_val, grad, jac)
    s_d = _dual_scale(st, it)
    return max(_inf(r_d) / s_d, _inf(r_eq), _inf(r_low), _inf(r_up), _inf(compl))


def _kkt_fresh(p, st, it, mu) -> float:
    g_val = p.eval_constraints(it.x)
    grad = p.eval_gradient(it.x)
    jac = p.eval_jacobian(it.x)
    return _kkt_from_parts(p, st, it, mu, g_val, grad, jac)


def _newton_step(p, st, it, mu, hess, grad, jac, g_val, opts, forced_delta=None):
    """Solve the condensed symmetric KKT system, regularizing the Hessian
    block until the inertia is (n, n_eq + n_low + n_up, 0).

    Returns ((dx, dy, dvL, dvU, dsL, dsU, dzL, dzU), delta) or None when the
    regularization cap is reached.
    """
    n = st.n
    n_eq, n_low, n_up = st.n_eq, st.n_low, st.n_up
    dim = n + n_eq + n_low + n_up

    dxl = it.x - p.x_lower
    dxu = p.x_upper - it.x
    sigma = np.zeros(n)
    if st.mask_xl.any():
        sigma[st.mask_xl] += it.z_lower[st.mask_xl] / dxl[st.mask_xl]
    if st.mask_xu.any():
        sigma[st.mask_xu] += it.z_upper[st.mask_xu] / dxu[st.mask_xu]

    J_eq = jac[st.eq_idx] if n_eq else np.zeros((0, n))
    J_low = jac[st.low_idx] if n_low else np.zeros((0, n))
    J_up = jac[st.up_idx] if n_up else np.zeros((0, n))
    theta_low = it.s_lower / it.v_lower if n_low else np.zeros(0)
    theta_up = it.s_upper / it.v_upper if n_up else np.zeros(0)

    r_d, r_eq, r_low, r_up, _ = _kkt_parts(p, st, it, mu, g_val, grad, jac)
    compl_zl = it.z_lower[st.mask_xl] * dxl[st.mask_xl] - mu
    compl_zu = it.z_upper[st.mask_xu] * dxu[st.mask_xu] - mu
    compl_vl = it.v_lower * it.s_lower - mu
    compl_vu = it.v_upper * it.s_upper - mu

    rhs = np.zeros(dim)
    rhs_x = -r_d
    if st.mask_xl.any():
        rhs_x[st.mask_xl] -= compl_zl / dxl[st.mask_xl]
    if st.mask_xu.any():
        rhs_x[st.mask_xu] += compl_zu / dxu[st.mask_xu]
    rhs[:n] = rhs_x
    rhs[n:n + n_eq] = -r_eq
    rhs[n + n_eq:n + n_eq + n_low] = r_low + compl_vl / it.v_lower if n_low else []
    rhs[n + n_eq + n_low:] = -r_up + compl_vu / it.v_upper if n_up else []

    K = np.zeros((dim, dim))
    K[:n, :n] = hess
    K[np.arange(n), np.arange(n)] += sigma
    if n_eq:
        K[:n, n:n + n_eq] = J_eq.T
        K[n:n + n_eq, :n] = J_eq
    if n_low:
        o = n + n_eq
        K[:n, o:o + n_low] = -J_low.T
        K[o:o + n_low, :n] = -J_low
        K[np.arange(o, o + n_low), np.arange(o, o + n_low)] = -theta_low
    if n_up:
        o = n + n_eq + n_low
        K[:n, o:o + n_up] = J_up.T
        K[o:o + n_up, :n] = J_up
        K[np.arange(o, o + n_up), np.arange(o, o + n_up)] = -theta_up

    delta = 0.0 if forced_delta is None else forced_delta
    while True:
        K_try = K.copy()
        if delta:
            K_try[np.arange(n), np.arange(n)] += delta
        ok = False
        try:
            w = np.linalg.eigvalsh(K_try)
            if np.all(np.isfinite(w)):
                pos = int(np.sum(w > 0.0))
                neg = int(np.sum(w < 0.0))
                ok = pos == n and neg == dim - n
        except np.linalg.LinAlgError:
            ok = False
        if ok:
            try:
                sol = np.linalg.solve(K_try, rhs)
                ok = bool(np.all(np.isfinite(sol)))
            except np.linalg.LinAlgError:
                ok = False
        if ok:
            break
        delta = opts.reg_init if delta == 0.0 else delta * 10.0
        if delta > _REG_CAP:
            return None

    dx = sol[:n]
    dy = sol[n:n + n_eq]
    dvl = sol[n + n_eq:n + n_eq + n_low]
    dvu = sol[n + n_eq + n_low:]
    dsl = (-compl_vl / it.v_lower - theta_low * dvl) if n_low else np.zeros(0)
    dsu = (-compl_vu / it.v_upper - theta_up * dvu) if n_up else np.zeros(0)
    dzl = np.zeros(n)
    dzu = np.zeros(n)
    if st.mask_xl.any():
        dzl[st.mask_xl] = (-compl_zl - it.z_lower[st.mask_xl] * dx[st.mask_xl]) / dxl[st.mask_xl]
    if st.mask_xu.any():
        dzu[st.mask_xu] = (-compl_zu + it.z_upper[st.mask_xu] * dx[st.mask_xu]) / dxu[st.mask_xu]
    return (dx, dy, dvl, dvu, dsl, dsu, dzl, dzu), delta


def _max_step(values: np.ndarray, deltas: np.ndarray, tau: float) -> float:
    """Largest alpha in (0, 1] keeping values + alpha * deltas >= (1 - tau) * values."""
    alpha = 1.0
    neg = deltas < 0
    if np.any(neg):
        alpha = min(alpha, float(np.min(-tau * values[neg] / deltas[neg])))
    return alpha


def _barrier_value(p, st, it, mu, f_val) -> float:
    val = f_val
    if mu:
        if st.n_low:
            val -= mu * float(np.sum(np.log(it.s_lower)))
        if st.n_up:
            val -= mu * float(np.sum(np.log(it.s_upper)))
        if st.mask_xl.any():
            val -= mu * float(np.sum(np.log((it.x - p.x_lower)[st.mask_xl])))
        if st.mask_xu.any():
            val -= mu * float(np.sum(np.log((p.x_upper - it.x)[st.mask_xu])))
    return val


def _primal_residual_l1(p, st, g_val, sL, sU) -> float:
    total = float(np.sum(np.abs(g_val[st.eq_idx] - p.constraint_lower[st.eq_idx])))
    if st.n_low:
        total += float(np.sum(np.abs(g_val[st.low_idx] - p.constraint_lower[st.low_idx] - sL)))
    if st.n_up:
        total += float(np.sum(np.abs(g_val[st.up_idx] - p.constraint_upper[st.up_idx] + sU)))
    return total


def _line_search(p, st, it, mu, f_val, g_val, grad, direction, nu, opts):
    """Backtracking Armijo search on the l1 merit function.

    Slacks are kept consistent with the true constraint distances: a trial
    snaps each slack onto its row's distance whenever that distance is
    positive, and a row that is feasible at the current iterate must stay
    feasible (its barrier term would otherwise leave its domain).  This is
    what lets a feasible warm start with a small barrier weight remain
    inside the feasible region from the first step on.

    Returns (new_iterate, alpha, nu, merit_after) or None on failure.
    """
    dx, dy, dvl, dvu, dsl, dsu, dzl, dzu = direction
    tau = max(opts.tau_min, 1.0 - mu)

    cl_low = p.constraint_lower[st.low_idx]
    cu_up = p.constraint_upper[st.up_idx]
    lock_low = (g_val[st.low_idx] - cl_low > 0.0) if st.n_low else np.zeros(0, bool)
    lock_up = (cu_up - g_val[st.up_idx] > 0.0) if st.n_up else np.zeros(0, bool)

    dxl = it.x - p.x_lower
    dxu = p.x_upper - it.x
    alpha_max = 1.0
    if st.n_low:
        alpha_max = min(alpha_max, _max_step(it.s_lower, dsl, tau))
    if st.n_up:
        alpha_max = min(alpha_max, _max_step(it.s_upper, dsu, tau))
    if st.mask_xl.any():
        alpha_max = min(alpha_max, _max_step(dxl[st.mask_xl], dx[st.mask_xl], tau))
    if st.mask_xu.any():
        alpha_max = min(alpha_max, _max_step(dxu[st.mask_xu], -dx[st.mask_xu], tau))

    alpha_dual = 1.0
    if st.n_low:
        alpha_dual = min(alpha_dual, _max_step(it.v_lower, dvl, tau))
    if st.n_up:
        alpha_dual = min(alpha_dual, _max_step(it.v_upper, dvu, tau))
    if st.mask_xl.any():
        alpha_dual = min(alpha_dual, _max_step(it.z_lower[st.mask_xl], dzl[st.mask_xl], tau))
    if st.mask_xu.any():
        alpha_dual = min(alpha_dual, _max_step(it.z_upper[st.mask_xu], dzu[st.mask_xu], tau))

    # Penalty weight: at least 1.1 * |duals|_inf at the current iterate,
    # bumped further if the direction would not be a descent direction for
    # the merit function.
    dual_inf = max(
        _inf(it.y) if st.n_eq else 0.0,
        _inf(it.v_lower) if st.n_low else 0.0,
        _inf(it.v_upper) if st.n_up else 0.0,
    )
    nu = max(nu, 1.1 * dual_inf)

    dphi = float(grad @ dx)
    if st.n_low:
        dphi -= mu * float(np.sum(dsl / it.s_lower))
    if st.n_up:
        dphi -= mu * float(np.sum(dsu / it.s_upper))
    if st.mask_xl.any():
        dphi -= mu * float(np.sum(dx[st.mask_xl] / dxl[st.mask_xl]))
    if st.mask_xu.any():
        dphi += mu * float(np.sum(dx[st.mask_xu] / dxu[st.mask_xu]))

    res0 = _primal_residual_l1(p, st, g_val, it.s_lower, it.s_upper)
    if dphi > 0.0 and res0 > 1e-14:
        nu = max(nu, 2.0 * dphi / res0)
    D = dphi - nu * res0

    merit0 = _barrier_value(p, st, it, mu, f_val) + nu * res0

    alpha = alpha_max
    for _ in range(80):
        if alpha < 1e-13:
            return None
        x_try = it.x + alpha * dx
        try:
            f_try = p.eval_objective(x_try)
            g_try = p.eval_constraints(x_try)
        except sg.EvalError:
            alpha *= _BACKTRACK
            continue
        if not math.isfinite(f_try) or not np.all(np.isfinite(g_try)):
            alpha *= _BACKTRACK
            continue
        dist_l = g_try[st.low_idx] - cl_low
        dist_u = cu_up - g_try[st.up_idx]
        if np.any(dist_l[lock_low] <= 0.0) or np.any(dist_u[lock_up] <= 0.0):
            alpha *= _BACKTRACK
            continue
        s_low_try = np.where(dist_l > 0.0, dist_l, it.s_lower + alpha * dsl)
        s_up_try = np.where(dist_u > 0.0, dist_u, it.s_upper + alpha * dsu)
        trial = Iterate(
            x=x_try, s_lower=s_low_try, s_upper=s_up_try,
            y=it.y, v_lower=it.v_lower, v_upper=it.v_upper,
            z_lower=it.z_lower, z_upper=it.z_upper,
        )
        res_try = _primal_residual_l1(p, st, g_try, s_low_try, s_up_try)
        merit_try = _barrier_value(p, st, trial, mu, f_try) + nu * res_try
        if merit_try <= merit0 + _ARMIJO_C * alpha * min(D, 0.0):
            new_it = Iterate(
                x=x_try,
                s_lower=s_low_try,
                s_upper=s_up_try,
                y=it.y + alpha * dy,
                v_lower=it.v_lower + alpha_dual * dvl,
                v_upper=it.v_upper + alpha_dual * dvu,
                z_lower=it.z_lower + alpha_dual * dzl,
                z_upper=it.z_upper + alpha_dual * dzu,
            )
            return new_it, alpha, nu, merit_try
        alpha *= _BACKTRACK
    return None
