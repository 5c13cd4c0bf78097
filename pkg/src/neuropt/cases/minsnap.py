"""Collision-free minimum-snap polynomial trajectories through a density
field.

A single degree-9 polynomial per axis connects rest at the start point to
rest at the goal; the cost samples the squared fourth derivative on a
uniform time grid, and an occupancy model (analytic blob field or a learned
3-D density network) caps the density at every sample.  Because the density
landscape is non-convex, the solve runs in two phases: first a convex
waypoint-tracking problem without the density constraint, then the full
problem warm-started from that trajectory with a small initial barrier
weight so the iterates stay feasible.

Internally the polynomial is parameterized on normalized time s = t / T,
which keeps the snap Gram matrix well conditioned; exported coefficients
are always in the plain t-power basis of :func:`poly_eval`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .. import learned as ln
from .. import nlpsolve as nl
from .. import symgraph as sg
from .fish import FitResult, ScenarioError, _fit_normalized, _f17

DEGREE = 9
N_COEFF = DEGREE + 1
DIMS = 3

# Realizes the strict density inequality: rho(r(t_k)) <= rho_bar - margin.
DENSITY_MARGIN = 1e-3

WAYPOINT_WEIGHT = 1e3


class TwoPhaseError(RuntimeError):
    """Raised when the staged solve cannot run to completion."""

    def __init__(self, message: str, phase1: nl.Solution | None = None):
        super().__init__(message)
        self.phase1 = phase1


@dataclass(frozen=True)
class Waypoint:
    time: float
    point: tuple[float, float, float]


@dataclass(frozen=True)
class BlobSpec:
    center: tuple[float, float, float]
    radius: float      # m
    amplitude: float   # peak density, dimensionless
    sharpness: float   # 1/m^2, steepness of the occupancy transition

    def __post_init__(self):
        if not (self.radius > 0 and self.amplitude > 0 and self.sharpness > 0):
            raise ScenarioError("blob radius, amplitude, and sharpness must be positive")


@dataclass(frozen=True)
class DensityFieldParams:
    blobs: tuple[BlobSpec, ...] = ()


@dataclass(frozen=True)
class TrajParams:
    p0: tuple[float, float, float]
    pf: tuple[float, float, float]
    total_time: float
    n_samples: int
    rho_bar: float = 1.0
    degree: int = DEGREE
    waypoints: tuple[Waypoint, ...] | None = None

    def __post_init__(self):
        if self.degree != DEGREE:
            raise ScenarioError(f"polynomial degree is fixed at {DEGREE}")
        if self.n_samples < self.degree + 1:
            raise ScenarioError(f"n_samples must be at least {self.degree + 1}")
        if not self.total_time > 0:
            raise ScenarioError("total_time must be positive")
        if not self.rho_bar > 0:
            raise ScenarioError("rho_bar must be positive")
        if self.waypoints is not None:
            for w in self.waypoints:
                if not 0.0 <= w.time <= self.total_time:
                    raise ScenarioError("waypoint times must lie within [0, total_time]")

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n_samples + 1) * (self.total_time / self.n_samples)


def default_traj_scenario() -> tuple[TrajParams, DensityFieldParams]:
    """Diagonal crossing over one blob obstacle between start and goal."""
    tp = TrajParams(
        p0=(-1.2, -0.9, 0.1),
        pf=(1.2, 0.9, 0.4),
        total_time=4.0,
        n_samples=60,
        rho_bar=1.0,
    )
    dp = DensityFieldParams(
        blobs=(BlobSpec(center=(0.0, 0.0, 0.25), radius=0.45,
                        amplitude=4.0, sharpness=30.0),),
    )
    return tp, dp


def traj_scenario_variants() -> list[tuple[TrajParams, DensityFieldParams]]:
    """Three start/goal configurations over the same obstacle field."""
    tp, dp = default_traj_scenario()
    return [
        (tp, dp),
        (replace(tp, p0=(-1.3, 0.8, 0.15), pf=(1.3, -0.7, 0.35)), dp),
        (replace(tp, p0=(0.0, -1.2, 0.2), pf=(0.1, 1.25, 0.3)), dp),
    ]


# ---------------------------------------------------------------------------
# Density oracles
# ---------------------------------------------------------------------------

def _logistic(v: float) -> float:
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def analytic_density(p: Sequence[float], dp: DensityFieldParams) -> float:
    """Soft occupancy: sum of logistic bumps, ~0 in free space and ~amplitude
    deep inside a blob (amplitude/2 exactly on its surface)."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    rho = 0.0
    for blob in dp.blobs:
        d = p - np.array(blob.center)
        rho += blob.amplitude * _logistic(
            blob.sharpness * (blob.radius**2 - float(d @ d))
        )
    return rho


def density_value(density, p: Sequence[float]) -> float:
    """Numeric density for either model kind."""
    if isinstance(density, ln.MlpSpec):
        return float(ln.eval_mlp(density, np.asarray(p).reshape(3))[0])
    return analytic_density(p, density)


def _density_expression(p_ref: sg.ExprRef, density) -> sg.ExprRef:
    g = p_ref.graph
    if isinstance(density, ln.MlpSpec):
        if density.in_features != 3 or density.out_features != 1:
            raise ScenarioError(
                "density model must map 3-D positions to one output; got "
                f"{density.in_features} -> {density.out_features}"
            )
        return ln.embed_mlp(density, p_ref)
    if not isinstance(density, DensityFieldParams):
        raise ScenarioError(f"unsupported density model type {type(density).__name__}")
    rho = g.constant(0.0)
    for blob in density.blobs:
        d = p_ref - g.constant(np.array(blob.center).reshape(3, 1))
        arg = (sg.sumsq(d) * -1.0 + blob.radius**2) * blob.sharpness
        rho = rho + sg.sigmoid(arg) * blob.amplitude
    return rho


def density_function(density, name: str | None = None) -> sg.SymFunction:
    """Density as a symbolic function of a 3-D position (for lowering)."""
    g = sg.ExprGraph()
    p = g.symbol("p", 3, 1)
    return sg.SymFunction([p], [_density_expression(p, density)], name=name)


# ---------------------------------------------------------------------------
# Polynomial basis
# ---------------------------------------------------------------------------

def _falling(i: int, d: int) -> float:
    out = 1.0
    for k in range(d):
        out *= i - k
    return out


def poly_eval(coeffs: np.ndarray, t: float, deriv: int = 0) -> np.ndarray:
    """Evaluate the trajectory polynomial (or a time derivative, order <= 4).

    `coeffs` is (10, 3) in the plain power basis: row i holds the
    coefficient of t^i per axis.
    """
    if not 0 <= deriv <= 4:
        raise ScenarioError("derivative order must lie in 0..4")
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(N_COEFF, DIMS)
    out = np.zeros(DIMS)
    for i in range(deriv, N_COEFF):
        out += coeffs[i] * (_falling(i, deriv) * t ** (i - deriv))
    return out


def poly_basis_row(t: float, deriv: int = 0) -> np.ndarray:
    """Plain power-basis row phi so that r_axis = phi @ c_axis."""
    if not 0 <= deriv <= 4:
        raise ScenarioError("derivative order must lie in 0..4")
    row = np.zeros(N_COEFF)
    for i in range(deriv, N_COEFF):
        row[i] = _falling(i, deriv) * t ** (i - deriv)
    return row


def polynomial_expression(c: sg.ExprRef, t: float, deriv: int = 0) -> sg.ExprRef:
    """Symbolic r^(deriv)(c, t) over a stacked (30,1) coefficient symbol in
    the plain power basis (axis-major layout)."""
    if c.shape != (N_COEFF * DIMS, 1):
        raise ScenarioError(f"coefficient vector must have shape ({N_COEFF * DIMS}, 1)")
    row = poly_basis_row(t, deriv)
    mat = np.zeros((DIMS, N_COEFF * DIMS))
    for a in range(DIMS):
        mat[a, a * N_COEFF:(a + 1) * N_COEFF] = row
    return sg.matmul(c.graph.constant(mat), c)


def _scaled_axis_matrix(tp: TrajParams, t: float, deriv: int) -> np.ndarray:
    """(3, 30) map from scaled coefficients to r^(deriv)(t)."""
    s = t / tp.total_time
    row = np.zeros(N_COEFF)
    for i in range(deriv, N_COEFF):
        row[i] = _falling(i, deriv) * s ** (i - deriv)
    row /= tp.total_time**deriv
    mat = np.zeros((DIMS, N_COEFF * DIMS))
    for a in range(DIMS):
        mat[a, a * N_COEFF:(a + 1) * N_COEFF] = row
    return mat


def coefficients_from_solution(tp: TrajParams, x: np.ndarray) -> np.ndarray:
    """Convert a decision vector (scaled basis) to (10, 3) plain-basis
    coefficients; with a power-of-two total time the conversion is exact."""
    x = np.asarray(x, dtype=np.float64).reshape(N_COEFF * DIMS)
    coeffs = np.zeros((N_COEFF, DIMS))
    for a in range(DIMS):
        for i in range(N_COEFF):
            coeffs[i, a] = x[a * N_COEFF + i] / tp.total_time**i
    return coeffs


def coefficients_to_decision(tp: TrajParams, coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(N_COEFF, DIMS)
    x = np.zeros(N_COEFF * DIMS)
    for a in range(DIMS):
        for i in range(N_COEFF):
            x[a * N_COEFF + i] = coeffs[i, a] * tp.total_time**i
    return x


# ---------------------------------------------------------------------------
# NLP construction
# ---------------------------------------------------------------------------

def build_min_snap_nlp(
    tp: TrajParams,
    density,
    include_density: bool = True,
    tracked_waypoints: Sequence[Waypoint] | None = None,
) -> nl.NlpProblem:
    """Snap-minimizing NLP over stacked polynomial coefficients.

    Cost: sum over the time grid of ||r''''(t_k)||^2, plus a weighted
    waypoint-tracking term when `tracked_waypoints` is given (phase 1).
    Equalities pin position / velocity / acceleration at both ends; with
    `include_density` each grid sample additionally satisfies
    rho(r(t_k)) <= rho_bar - margin.
    """
    g = sg.ExprGraph()
    c = g.symbol("c", N_COEFF * DIMS, 1)
    grid = tp.grid

    snap_rows = np.vstack([_scaled_axis_matrix(tp, t, 4) for t in grid])
    objective = sg.sumsq(sg.matmul(g.constant(snap_rows), c))

    if tracked_waypoints:
        track_rows = np.vstack(
            [_scaled_axis_matrix(tp, w.time, 0) for w in tracked_waypoints]
        )
        targets = np.concatenate(
            [np.asarray(w.point, dtype=np.float64) for w in tracked_waypoints]
        ).reshape(-1, 1)
        miss = sg.matmul(g.constant(track_rows), c) - g.constant(targets)
        objective = objective + sg.sumsq(miss) * WAYPOINT_WEIGHT

    bc_rows = np.vstack([
        _scaled_axis_matrix(tp, 0.0, 0),
        _scaled_axis_matrix(tp, 0.0, 1),
        _scaled_axis_matrix(tp, 0.0, 2),
        _scaled_axis_matrix(tp, tp.total_time, 0),
        _scaled_axis_matrix(tp, tp.total_time, 1),
        _scaled_axis_matrix(tp, tp.total_time, 2),
    ])
    bc_vals = np.concatenate([
        np.asarray(tp.p0, dtype=np.float64), np.zeros(3), np.zeros(3),
        np.asarray(tp.pf, dtype=np.float64), np.zeros(3), np.zeros(3),
    ])

    rows: list[sg.ExprRef] = [sg.matmul(g.constant(bc_rows), c)]
    cl = list(bc_vals)
    cu = list(bc_vals)

    if include_density:
        for t in grid:
            pos = sg.matmul(g.constant(_scaled_axis_matrix(tp, t, 0)), c)
            rows.append(_density_expression(pos, density))
            cl.append(-np.inf)
            cu.append(tp.rho_bar - DENSITY_MARGIN)

    return nl.assemble(
        c,
        objective,
        sg.concat(rows),
        constraint_lower=cl,
        constraint_upper=cu,
        x_init=np.zeros(N_COEFF * DIMS),
    )


# ---------------------------------------------------------------------------
# Waypoints and the two-phase solve
# ---------------------------------------------------------------------------

def _density_gradient(density, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
    grad = np.zeros(3)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        grad[a] = (density_value(density, p + e) - density_value(density, p - e)) / (2 * h)
    return grad


def _push_direction(tp: TrajParams, density) -> np.ndarray:
    """One common push direction for all waypoints: downhill in density at
    the densest point of the straight start-goal segment, orthogonal to the
    segment.  A shared direction keeps the pushed waypoints on one side of
    the obstacle, so the tracking polynomial arcs around it instead of
    weaving through."""
    p0 = np.array(tp.p0)
    pf = np.array(tp.pf)
    line = pf - p0
    line = line / max(np.linalg.norm(line), 1e-12)
    fractions = np.linspace(0.0, 1.0, 101)
    pts = p0[None, :] + fractions[:, None] * (pf - p0)[None, :]
    dens = np.array([density_value(density, q) for q in pts])
    grad = _density_gradient(density, pts[int(dens.argmax())])
    perp = -(grad - (grad @ line) * line)
    norm = float(np.linalg.norm(perp))
    if norm < 1e-9:
        for cand in (np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]),
                     np.array([1.0, 0.0, 0.0])):
            perp = cand - (cand @ line) * line
            norm = float(np.linalg.norm(perp))
            if norm > 1e-9:
                break
    return perp / norm


def default_waypoints(tp: TrajParams, density, count: int = 5) -> tuple[Waypoint, ...]:
    """Evenly timed waypoints on the straight line, pushed off the obstacle.

    Each waypoint needs some push distance along the common direction to get
    its density under 0.15 * rho_bar; the applied pushes follow a smooth
    sin^2 bump over [0, total_time] sized to cover the worst requirement
    plus clearance, which keeps the arc cheap in snap and therefore tightly
    trackable in phase 1.
    """
    p0 = np.array(tp.p0)
    pf = np.array(tp.pf)
    target = 0.15 * tp.rho_bar
    direction = _push_direction(tp, density)
    times = [w * tp.total_time / (count + 1) for w in range(1, count + 1)]
    profile = [math.sin(math.pi * t / tp.total_time) ** 2 for t in times]
    scale = 0.0
    for t_w, prof in zip(times, profile):
        pt = p0 + (t_w / tp.total_time) * (pf - p0)
        dist = 0.0
        while density_value(density, pt + dist * direction) > target:
            dist += 0.02
            if dist > 50.0:
                raise TwoPhaseError(
                    f"could not push waypoint at t={t_w:.3f} out of the obstacle"
                )
        scale = max(scale, dist / max(prof, 0.2))
    if scale > 0.0:
        scale += 0.45  # clearance absorbing the tracking sag between waypoints
    out = []
    for t_w, prof in zip(times, profile):
        pt = p0 + (t_w / tp.total_time) * (pf - p0) + (scale * prof) * direction
        out.append(Waypoint(time=t_w, point=tuple(float(v) for v in pt)))
    return tuple(out)


def solve_two_phase(
    tp: TrajParams,
    density,
    opts: nl.SolverOptions | None = None,
    mu_phase2: float = 1e-4,
) -> tuple[nl.Solution, nl.Solution]:
    """Waypoint-tracking phase without the density constraint, then the full
    problem warm-started from phase 1 with a small initial barrier weight.

    Raises TwoPhaseError when phase 1 fails or when the phase-1 trajectory
    already violates the density cap somewhere on the grid (the advice then
    is to supply denser or better-placed waypoints).
    """
    opts = opts or nl.SolverOptions()
    wps = tp.waypoints if tp.waypoints else default_waypoints(tp, density)
    if not wps:
        raise TwoPhaseError("phase 1 needs at least one waypoint")
    for w in wps:
        rho = density_value(density, w.point)
        if rho >= tp.rho_bar:
            raise TwoPhaseError(
                f"waypoint at t={w.time:.3f} is not collision-free "
                f"(density {rho:.3f} >= {tp.rho_bar:.3f})"
            )

    p1 = build_min_snap_nlp(tp, density, include_density=False, tracked_waypoints=wps)
    sol1 = nl.solve(p1, opts)
    if sol1.status is not nl.SolveStatus.CONVERGED:
        raise TwoPhaseError(
            f"phase 1 did not converge (status {sol1.status.value})", phase1=sol1
        )

    coeffs1 = coefficients_from_solution(tp, sol1.x)
    cap = tp.rho_bar - DENSITY_MARGIN
    for t in tp.grid:
        rho = density_value(density, poly_eval(coeffs1, t, 0))
        if rho >= cap:
            raise TwoPhaseError(
                f"phase-1 trajectory is not strictly feasible at t={t:.3f} "
                f"(density {rho:.4f} >= {cap:.4f}); add denser waypoints",
                phase1=sol1,
            )

    p2 = build_min_snap_nlp(tp, density, include_density=True)
    sol2 = nl.solve_warm(p2, sol1.x, mu_phase2, opts)
    return sol1, sol2


# ---------------------------------------------------------------------------
# Density model fitting
# ---------------------------------------------------------------------------

def _density_domain(tp: TrajParams, dp: DensityFieldParams) -> tuple[np.ndarray, np.ndarray]:
    pts = [np.array(tp.p0), np.array(tp.pf)]
    for blob in dp.blobs:
        c = np.array(blob.center)
        pts.append(c - (blob.radius + 0.5))
        pts.append(c + (blob.radius + 0.5))
    stack = np.vstack(pts)
    return stack.min(axis=0) - 0.25, stack.max(axis=0) + 0.25


def fit_density_model(
    tp: TrajParams,
    dp: DensityFieldParams,
    n_samples: int = 5000,
    seed: int = 0,
    hidden: Sequence[int] = (64, 64),
    epochs: int = 3000,
    learning_rate: float = 0.1,
    batch_size: int = 500,
    holdout_fraction: float = 0.2,
) -> FitResult:
    """Sample the analytic density over the scenario's bounding box and fit
    a 3-D position -> density network with normalized inputs."""
    if n_samples < 10:
        raise ScenarioError("n_samples must be at least 10")
    rng = np.random.default_rng(seed)
    lo, hi = _density_domain(tp, dp)
    X = rng.uniform(lo, hi, size=(n_samples, 3))
    Y = np.array([[analytic_density(row, dp)] for row in X])
    offset = 0.5 * (lo + hi)
    scale = 2.0 / (hi - lo)
    cfg = ln.TrainConfig(
        learning_rate=learning_rate, epochs=epochs, batch_size=batch_size, seed=seed
    )
    return _fit_normalized(
        X, Y, offset, scale, hidden, ln.ActivationKind.TANH, cfg, holdout_fraction
    )


# ---------------------------------------------------------------------------
# Scenario files and trajectory export
# ---------------------------------------------------------------------------

TRAJ_FORMAT = "neuropt-traj-v1"

_TRAJ_KEYS = {"format", "p0", "pf", "total_time", "n_samples", "rho_bar",
              "waypoints", "density"}
_BLOB_KEYS = {"center", "radius", "amplitude", "sharpness"}
_WAYPOINT_KEYS = {"time", "point"}


def _triple(doc, key) -> tuple[float, float, float]:
    try:
        vals = [float(v) for v in doc[key]]
    except (KeyError, TypeError, ValueError):
        raise ScenarioError(f"field '{key}': expected three numbers") from None
    if len(vals) != 3:
        raise ScenarioError(f"field '{key}': expected exactly three numbers")
    return (vals[0], vals[1], vals[2])


def traj_scenario_from_dict(doc: dict) -> tuple[TrajParams, DensityFieldParams]:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    unknown = set(doc) - _TRAJ_KEYS
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    if doc.get("format") != TRAJ_FORMAT:
        raise ScenarioError(f"field 'format': expected {TRAJ_FORMAT!r}")
    waypoints = None
    if doc.get("waypoints"):
        wps = []
        for k, w in enumerate(doc["waypoints"]):
            unknown = set(w) - _WAYPOINT_KEYS
            if unknown:
                raise ScenarioError(f"waypoint {k}: unknown keys {sorted(unknown)}")
            wps.append(Waypoint(time=float(w["time"]), point=_triple(w, "point")))
        waypoints = tuple(wps)
    try:
        tp = TrajParams(
            p0=_triple(doc, "p0"), pf=_triple(doc, "pf"),
            total_time=float(doc["total_time"]),
            n_samples=int(doc["n_samples"]),
            rho_bar=float(doc.get("rho_bar", 1.0)),
            waypoints=waypoints,
        )
    except KeyError as exc:
        raise ScenarioError(f"missing scenario field {exc}") from None
    blobs = []
    raw_density = doc.get("density", {}) or {}
    if set(raw_density) - {"blobs"}:
        raise ScenarioError("density field only supports a 'blobs' list")
    for k, blob in enumerate(raw_density.get("blobs", [])):
        unknown = set(blob) - _BLOB_KEYS
        if unknown:
            raise ScenarioError(f"blob {k}: unknown keys {sorted(unknown)}")
        blobs.append(BlobSpec(
            center=_triple(blob, "center"),
            radius=float(blob["radius"]),
            amplitude=float(blob["amplitude"]),
            sharpness=float(blob["sharpness"]),
        ))
    return tp, DensityFieldParams(blobs=tuple(blobs))


def traj_scenario_to_dict(tp: TrajParams, dp: DensityFieldParams) -> dict:
    doc = {
        "format": TRAJ_FORMAT,
        "p0": list(tp.p0), "pf": list(tp.pf),
        "total_time": tp.total_time,
        "n_samples": tp.n_samples,
        "rho_bar": tp.rho_bar,
        "density": {
            "blobs": [
                {
                    "center": list(b.center), "radius": b.radius,
                    "amplitude": b.amplitude, "sharpness": b.sharpness,
                }
                for b in dp.blobs
            ],
        },
    }
    if tp.waypoints:
        doc["waypoints"] = [
            {"time": w.time, "point": list(w.point)} for w in tp.waypoints
        ]
    return doc


def trajectory_csv(tp: TrajParams, coeffs: np.ndarray, density) -> str:
    """CSV text sampling the trajectory and its model density on the grid."""
    lines = ["k,t,px,py,pz,rho"]
    for k, t in enumerate(tp.grid):
        pos = poly_eval(coeffs, t, 0)
        rho = density_value(density, pos)
        lines.append(
            f"{k},{_f17(t)},{_f17(pos[0])},{_f17(pos[1])},{_f17(pos[2])},{_f17(rho)}"
        )
    return "\n".join(lines) + "\n"
