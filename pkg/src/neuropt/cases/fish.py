"""Energy-optimal point-mass navigation through a planar flow field.

The fish is a planar point mass driven by velocity commands on top of the
water's own velocity; explicit Euler discretization turns the continuous
dynamics into equality constraints between consecutive knots.  The cost
penalizes changes in consecutive velocity commands, the circular stone at
the origin is kept clear through a quadratic keep-out constraint, and both
the commands and the positions are box-bounded.

The water velocity enters the constraint graph either as an analytic
superposition of drifting regularized vortices (the training oracle) or as
an embedded learned model of that field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import learned as ln
from .. import nlpsolve as nl
from .. import symgraph as sg


class ScenarioError(ValueError):
    """Raised for malformed or inconsistent scenario data."""


@dataclass(frozen=True)
class VortexSpec:
    center: tuple[float, float]
    circulation: float          # m^2/s, sign sets the swirl direction
    core_radius: float          # m, regularization length of the core
    drift: tuple[float, float]  # m/s, center translation velocity

    def __post_init__(self):
        if not self.core_radius > 0:
            raise ScenarioError("vortex core_radius must be positive")


@dataclass(frozen=True)
class FlowFieldParams:
    u_inf: tuple[float, float] = (0.0, 0.0)
    vortices: tuple[VortexSpec, ...] = ()


@dataclass(frozen=True)
class FishParams:
    p0: tuple[float, float]
    pf: tuple[float, float]
    n_steps: int
    dt: float
    u_lo: tuple[float, float]
    u_hi: tuple[float, float]
    p_lo: tuple[float, float]
    p_hi: tuple[float, float]
    r_stone: float

    def __post_init__(self):
        if self.n_steps < 2:
            raise ScenarioError("n_steps must be at least 2")
        if not self.dt > 0:
            raise ScenarioError("dt must be positive")
        for lo, hi, label in ((self.u_lo, self.u_hi, "u"), (self.p_lo, self.p_hi, "p")):
            if not all(l < h for l, h in zip(lo, hi)):
                raise ScenarioError(f"{label}_lo must be strictly below {label}_hi")
        if not self.r_stone > 0:
            raise ScenarioError("r_stone must be positive")
        for pt, label in ((self.p0, "p0"), (self.pf, "pf")):
            if math.hypot(*pt) <= self.r_stone:
                raise ScenarioError(f"{label} lies inside the stone")
            if not all(l <= v <= h for v, l, h in zip(pt, self.p_lo, self.p_hi)):
                raise ScenarioError(f"{label} lies outside the river bounds")

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def n_vars(self) -> int:
        return 2 * (self.n_steps + 1) + 2 * self.n_steps


def default_fish_scenario() -> tuple[FishParams, FlowFieldParams]:
    """Upstream crossing of a 8 m x 2 m river reach with two drifting
    counter-rotating vortices shed behind the stone."""
    # The 2.0 m/s command bound leaves real margin over the bare crossing
    # requirement (6.12 m in 6 s against the 0.6 m/s stream needs 1.62 m/s
    # before the stone detour); tighter caps make the program infeasible.
    fish = FishParams(
        p0=(3.0, -0.6),
        pf=(-3.0, 0.6),
        n_steps=60,
        dt=0.1,
        u_lo=(-2.0, -2.0),
        u_hi=(2.0, 2.0),
        p_lo=(-4.0, -1.0),
        p_hi=(4.0, 1.0),
        r_stone=0.35,
    )
    flow = FlowFieldParams(
        u_inf=(0.6, 0.0),
        vortices=(
            VortexSpec(center=(0.8, 0.35), circulation=0.8,
                       core_radius=0.25, drift=(0.3, 0.0)),
            VortexSpec(center=(0.8, -0.35), circulation=-0.8,
                       core_radius=0.25, drift=(0.3, 0.0)),
        ),
    )
    return fish, flow


# ---------------------------------------------------------------------------
# Analytic flow oracle
# ---------------------------------------------------------------------------

def analytic_flow(t: float, p: Sequence[float], fp: FlowFieldParams) -> np.ndarray:
    """Water velocity at time t and position p.

    Free stream plus regularized vortices: each vortex contributes
    (gamma / 2 pi) * rot90(d) / |d|^2 * (1 - exp(-|d|^2 / rc^2)) with
    d = p - center(t); the exponential core factor keeps the velocity finite
    and the contribution vanishes at the center itself.
    """
    p = np.asarray(p, dtype=np.float64).reshape(2)
    v = np.array(fp.u_inf, dtype=np.float64)
    for vx in fp.vortices:
        c = np.array(vx.center) + t * np.array(vx.drift)
        d = p - c
        q = float(d @ d)
        if q == 0.0:
            continue
        swirl = (vx.circulation / (2.0 * math.pi)) * (
            1.0 - math.exp(-q / vx.core_radius**2)
        ) / q
        v += swirl * np.array([-d[1], d[0]])
    return v


def _flow_expression(t, p_ref: sg.ExprRef, flow) -> sg.ExprRef:
    """Symbolic water velocity at (t, p); `t` is a float or scalar ExprRef,
    `flow` is FlowFieldParams or a 3-input / 2-output MlpSpec."""
    g = p_ref.graph
    if isinstance(flow, ln.MlpSpec):
        if flow.in_features != 3 or flow.out_features != 2:
            raise ScenarioError(
                "flow model must map (t, px, py) to 2 outputs; got "
                f"{flow.in_features} -> {flow.out_features}"
            )
        t_ref = t if isinstance(t, sg.ExprRef) else g.constant(float(t))
        return ln.embed_mlp(flow, sg.concat([t_ref, p_ref]))
    if not isinstance(flow, FlowFieldParams):
        raise ScenarioError(f"unsupported flow model type {type(flow).__name__}")
    v = g.constant(np.array(flow.u_inf).reshape(2, 1))
    rot90 = g.constant(np.array([[0.0, -1.0], [1.0, 0.0]]))
    for vx in flow.vortices:
        center = np.array(vx.center, dtype=np.float64).reshape(2, 1)
        drift = np.array(vx.drift, dtype=np.float64).reshape(2, 1)
        if isinstance(t, sg.ExprRef):
            c = g.constant(center) + t * g.constant(drift)
        else:
            c = g.constant(center + float(t) * drift)
        d = p_ref - c
        q = sg.sumsq(d)
        gain = vx.circulation / (2.0 * math.pi)
        core = 1.0 - sg.exp(q * (-1.0 / vx.core_radius**2))
        swirl = (core / q) * gain
        v = v + swirl * sg.matmul(rot90, d)
    return v


def fish_dynamics_function(flow, name: str | None = None) -> sg.SymFunction:
    """State derivative f(x, u, t) = u + v_flow(t, x) as a symbolic function
    with inputs (x, u, t)."""
    g = sg.ExprGraph()
    x = g.symbol("x", 2, 1)
    u = g.symbol("u", 2, 1)
    t = g.symbol("t", 1, 1)
    xdot = u + _flow_expression(t, x, flow)
    return sg.SymFunction([x, u, t], [xdot], name=name)


# ---------------------------------------------------------------------------
# NLP construction
# ---------------------------------------------------------------------------

def _selector(n: int, start: int, count: int) -> np.ndarray:
    sel = np.zeros((count, n))
    sel[np.arange(count), start + np.arange(count)] = 1.0
    return sel


def build_fish_nlp(fp: FishParams, flow) -> nl.NlpProblem:
    """Direct transcription of the navigation problem.

    Decision vector stacks knot positions x_0..x_N and commands u_0..u_{N-1}.
    The cost sums ||(u_{k+1} - u_k) / dt||^2; equality constraints pin the
    endpoints and enforce x_{k+1} = x_k + dt * (u_k + v(t_k, x_k)); the
    keep-out constraint demands |x_k|^2 >= r_stone^2 at every knot.
    """
    N = fp.n_steps
    n = fp.n_vars
    g = sg.ExprGraph()
    X = g.symbol("z", n, 1)

    def pos(k: int) -> sg.ExprRef:
        return sg.matmul(g.constant(_selector(n, 2 * k, 2)), X)

    def cmd(k: int) -> sg.ExprRef:
        return sg.matmul(g.constant(_selector(n, 2 * (N + 1) + 2 * k, 2)), X)

    # Cost: one stacked difference matrix keeps the graph small.
    diff = np.zeros((2 * (N - 1), n))
    base = 2 * (N + 1)
    for k in range(N - 1):
        diff[2 * k:2 * k + 2, base + 2 * (k + 1):base + 2 * (k + 1) + 2] = np.eye(2)
        diff[2 * k:2 * k + 2, base + 2 * k:base + 2 * k + 2] -= np.eye(2)
    objective = sg.sumsq(sg.matmul(g.constant(diff), X) * (1.0 / fp.dt))

    rows: list[sg.ExprRef] = [pos(0), pos(N)]
    cl: list[float] = [*fp.p0, *fp.pf]
    cu: list[float] = [*fp.p0, *fp.pf]

    for k in range(N):
        t_k = k * fp.dt
        v_k = _flow_expression(t_k, pos(k), flow)
        resid = pos(k + 1) - pos(k) - (cmd(k) + v_k) * fp.dt
        rows.append(resid)
        cl.extend([0.0, 0.0])
        cu.extend([0.0, 0.0])

    for k in range(N + 1):
        rows.append(sg.sumsq(pos(k)))
        cl.append(fp.r_stone**2)
        cu.append(np.inf)

    x_lower = np.concatenate([np.tile(fp.p_lo, N + 1), np.tile(fp.u_lo, N)])
    x_upper = np.concatenate([np.tile(fp.p_hi, N + 1), np.tile(fp.u_hi, N)])

    return nl.assemble(
        X,
        objective,
        sg.concat(rows),
        constraint_lower=cl,
        constraint_upper=cu,
        x_lower=x_lower,
        x_upper=x_upper,
        x_init=_initial_guess(fp),
    )


def _initial_guess(fp: FishParams) -> np.ndarray:
    """Straight-line knots pushed off the stone, constant nominal command."""
    N = fp.n_steps
    p0 = np.array(fp.p0)
    pf = np.array(fp.pf)
    clearance = 1.3 * fp.r_stone
    knots = np.zeros((N + 1, 2))
    path = pf - p0
    for k in range(N + 1):
        q = p0 + (k / N) * path
        r = float(np.hypot(*q))
        if r < clearance:
            if r < 1e-9:
                heading = np.array([-path[1], path[0]])
                heading /= max(np.linalg.norm(heading), 1e-12)
                q = clearance * heading
            else:
                q = q * (clearance / r)
        knots[k] = np.clip(q, fp.p_lo, fp.p_hi)
    u0 = np.tile(path / (N * fp.dt), N)
    return np.concatenate([knots.ravel(), u0])


def unpack_fish_solution(fp: FishParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a decision vector into (times, states (N+1,2), commands (N,2))."""
    N = fp.n_steps
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    states = x[: 2 * (N + 1)].reshape(N + 1, 2)
    cmds = x[2 * (N + 1):].reshape(N, 2)
    times = np.arange(N + 1) * fp.dt
    return times, states, cmds


def flow_value(flow, t: float, p: Sequence[float]) -> np.ndarray:
    """Numeric flow velocity for either model kind (oracle for residuals)."""
    if isinstance(flow, ln.MlpSpec):
        return ln.eval_mlp(flow, [t, *np.asarray(p).reshape(2)])
    return analytic_flow(t, p, flow)


def dynamics_residuals(fp: FishParams, flow, x: np.ndarray) -> np.ndarray:
    """Per-step Euler residuals |x_{k+1} - x_k - dt (u_k + v(t_k, x_k))|."""
    _, states, cmds = unpack_fish_solution(fp, x)
    out = np.zeros(fp.n_steps)
    for k in range(fp.n_steps):
        v = flow_value(flow, k * fp.dt, states[k])
        resid = states[k + 1] - states[k] - fp.dt * (cmds[k] + v)
        out[k] = float(np.max(np.abs(resid)))
    return out


def solve_fish(fp: FishParams, flow, opts: nl.SolverOptions | None = None) -> nl.Solution:
    return nl.solve(build_fish_nlp(fp, flow), opts)


# ---------------------------------------------------------------------------
# Flow model fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    spec: ln.MlpSpec
    train_mse: float
    holdout_mse: float
    output_variance: float

    @property
    def mse_over_variance(self) -> float:
        return self.holdout_mse / max(self.output_variance, 1e-300)


def _fold_output_normalization(spec: ln.MlpSpec, mean: np.ndarray, std: np.ndarray) -> ln.MlpSpec:
    """Rescale the final linear layer so the net maps to raw target units.

    Training happens on (y - mean) / std; with an identity output activation
    the affine map folds exactly into the last layer's rows.
    """
    if spec.output_activation is not ln.ActivationKind.IDENTITY:
        raise ScenarioError("output normalization needs an identity output layer")
    last = spec.layers[-1]
    w = last.weights * std[:, None]
    b = last.biases * std + mean
    pairs = [(l.weights, l.biases) for l in spec.layers[:-1]] + [(w, b)]
    return ln.make_mlp_spec(pairs, spec.hidden_activation, spec.output_activation)


def _fit_normalized(
    X: np.ndarray,          # (n, d) raw inputs
    Y: np.ndarray,          # (n, q) raw targets
    offset: np.ndarray,
    scale: np.ndarray,
    hidden: Sequence[int],
    activation: ln.ActivationKind,
    cfg: ln.TrainConfig,
    holdout_fraction: float,
) -> FitResult:
    n = X.shape[0]
    n_hold = max(1, int(round(n * holdout_fraction)))
    n_train = n - n_hold
    if n_train < 1:
        raise ScenarioError("not enough samples left after the holdout split")
    Xs = (X - offset) * scale
    y_mean = Y[:n_train].mean(axis=0)
    y_std = np.maximum(Y[:n_train].std(axis=0), 1e-9)
    Yn = (Y - y_mean) / y_std

    arch = ln.MlpArchitecture(
        in_features=X.shape[1],
        hidden=tuple(int(h) for h in hidden),
        out_features=Y.shape[1],
        hidden_activation=activation,
        output_activation=ln.ActivationKind.IDENTITY,
    )
    samples = [(Xs[i], Yn[i]) for i in range(n_train)]
    trained, _ = ln.fit_mlp(samples, arch, cfg)
    spec = _fold_output_normalization(trained, y_mean, y_std)
    spec = ln.with_input_scaling(spec, offset, scale)

    pred_train = ln._forward_batch(spec, X[:n_train].T).T
    pred_hold = ln._forward_batch(spec, X[n_train:].T).T
    hold = Y[n_train:]
    return FitResult(
        spec=spec,
        train_mse=float(np.mean((pred_train - Y[:n_train]) ** 2)),
        holdout_mse=float(np.mean((pred_hold - hold) ** 2)),
        output_variance=float(np.mean((hold - hold.mean(axis=0)) ** 2)),
    )


def fit_flow_model(
    fp: FishParams,
    flow: FlowFieldParams,
    n_samples: int = 5000,
    seed: int = 0,
    hidden: Sequence[int] = (64, 64),
    epochs: int = 3000,
    learning_rate: float = 0.1,
    batch_size: int = 500,
    holdout_fraction: float = 0.2,
) -> FitResult:
    """Sample the analytic flow over the scenario's (t, p) domain and fit a
    (t, px, py) -> velocity network with normalized inputs."""
    if n_samples < 10:
        raise ScenarioError("n_samples must be at least 10")
    rng = np.random.default_rng(seed)
    lo = np.array([0.0, fp.p_lo[0], fp.p_lo[1]])
    hi = np.array([fp.horizon, fp.p_hi[0], fp.p_hi[1]])
    X = rng.uniform(lo, hi, size=(n_samples, 3))
    Y = np.array([analytic_flow(row[0], row[1:], flow) for row in X])
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

FISH_FORMAT = "neuropt-fish-v1"

_FISH_KEYS = {"format", "p0", "pf", "n_steps", "dt", "u_lo", "u_hi",
              "p_lo", "p_hi", "r_stone", "flow"}
_FLOW_KEYS = {"u_inf", "vortices"}
_VORTEX_KEYS = {"center", "circulation", "core_radius", "drift"}


def _pair(doc, key) -> tuple[float, float]:
    try:
        vals = [float(v) for v in doc[key]]
    except (KeyError, TypeError, ValueError):
        raise ScenarioError(f"field '{key}': expected a pair of numbers") from None
    if len(vals) != 2:
        raise ScenarioError(f"field '{key}': expected exactly two numbers")
    return (vals[0], vals[1])


def fish_scenario_from_dict(doc: dict) -> tuple[FishParams, FlowFieldParams]:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    unknown = set(doc) - _FISH_KEYS
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    if doc.get("format") != FISH_FORMAT:
        raise ScenarioError(f"field 'format': expected {FISH_FORMAT!r}")
    try:
        fish = FishParams(
            p0=_pair(doc, "p0"), pf=_pair(doc, "pf"),
            n_steps=int(doc["n_steps"]), dt=float(doc["dt"]),
            u_lo=_pair(doc, "u_lo"), u_hi=_pair(doc, "u_hi"),
            p_lo=_pair(doc, "p_lo"), p_hi=_pair(doc, "p_hi"),
            r_stone=float(doc["r_stone"]),
        )
    except KeyError as exc:
        raise ScenarioError(f"missing scenario field {exc}") from None
    raw_flow = doc.get("flow", {}) or {}
    unknown = set(raw_flow) - _FLOW_KEYS
    if unknown:
        raise ScenarioError(f"unknown flow keys: {sorted(unknown)}")
    vortices = []
    for k, v in enumerate(raw_flow.get("vortices", [])):
        unknown = set(v) - _VORTEX_KEYS
        if unknown:
            raise ScenarioError(f"vortex {k}: unknown keys {sorted(unknown)}")
        vortices.append(VortexSpec(
            center=_pair(v, "center"),
            circulation=float(v["circulation"]),
            core_radius=float(v["core_radius"]),
            drift=_pair(v, "drift"),
        ))
    flow = FlowFieldParams(
        u_inf=_pair(raw_flow, "u_inf") if "u_inf" in raw_flow else (0.0, 0.0),
        vortices=tuple(vortices),
    )
    return fish, flow


def fish_scenario_to_dict(fp: FishParams, flow: FlowFieldParams) -> dict:
    return {
        "format": FISH_FORMAT,
        "p0": list(fp.p0), "pf": list(fp.pf),
        "n_steps": fp.n_steps, "dt": fp.dt,
        "u_lo": list(fp.u_lo), "u_hi": list(fp.u_hi),
        "p_lo": list(fp.p_lo), "p_hi": list(fp.p_hi),
        "r_stone": fp.r_stone,
        "flow": {
            "u_inf": list(flow.u_inf),
            "vortices": [
                {
                    "center": list(v.center),
                    "circulation": v.circulation,
                    "core_radius": v.core_radius,
                    "drift": list(v.drift),
                }
                for v in flow.vortices
            ],
        },
    }


def _f17(x: float) -> str:
    return format(float(x), ".17g")


def fish_trajectory_csv(fp: FishParams, x: np.ndarray) -> str:
    """CSV text with one row per knot; command columns are empty on the final
    knot, which has no command."""
    times, states, cmds = unpack_fish_solution(fp, x)
    lines = ["k,t,px,py,ux,uy"]
    for k in range(fp.n_steps + 1):
        ux = _f17(cmds[k, 0]) if k < fp.n_steps else ""
        uy = _f17(cmds[k, 1]) if k < fp.n_steps else ""
        lines.append(
            f"{k},{_f17(times[k])},{_f17(states[k, 0])},{_f17(states[k, 1])},{ux},{uy}"
        )
    return "\n".join(lines) + "\n"
