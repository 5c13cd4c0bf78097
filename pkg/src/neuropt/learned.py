"""Portable MLP weights, symbolic embedding, direct inference, and training.

The weights file is UTF-8 JSON with format key ``neuropt-mlp-v1``; numbers
are written with 17 significant digits so a save/load round trip reproduces
every double exactly.  :func:`embed_mlp` recreates the network's forward
pass as plain graph operations (constants, matrix products, adds, and
activation nodes) with the weights copied in, while :func:`eval_mlp` is a
deliberately independent loop-based interpreter used to cross-check the
embedding.

Only feed-forward perceptrons are supported.  The intended extension point
for other model families is to author them directly against the
:class:`~neuropt.symgraph.SymFunction` contract (a value expression plus
symbolically derived Jacobian/Hessian over declared symbol inputs) rather
than through this module; no callback-based adapter is provided.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import symgraph as sg


class MlpError(ValueError):
    """Raised for malformed weight files or inconsistent specs."""


class FitError(ValueError):
    """Raised when training cannot proceed (bad data or divergence)."""


class ActivationKind(Enum):
    TANH = "tanh"
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


_ACT_TO_OP = {
    ActivationKind.TANH: sg.OpKind.TANH,
    ActivationKind.RELU: sg.OpKind.RELU,
    ActivationKind.SIGMOID: sg.OpKind.SIGMOID,
}


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (out, in), row-major
    biases: np.ndarray   # (out,)


@dataclass(frozen=True)
class InputScaling:
    """Per-input affine map applied before the first layer: (x - offset) * scale."""
    offset: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True)
class MlpSpec:
    in_features: int
    layers: tuple[Layer, ...]
    hidden_activation: ActivationKind = ActivationKind.TANH
    output_activation: ActivationKind = ActivationKind.IDENTITY
    input_scaling: InputScaling | None = None

    @property
    def out_features(self) -> int:
        return self.layers[-1].weights.shape[0]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.in_features,) + tuple(l.weights.shape[0] for l in self.layers)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    arr.setflags(write=False)
    return arr


def make_mlp_spec(
    layers: Sequence[tuple[np.ndarray, np.ndarray]],
    hidden_activation: ActivationKind = ActivationKind.TANH,
    output_activation: ActivationKind = ActivationKind.IDENTITY,
    input_scaling: tuple[np.ndarray, np.ndarray] | None = None,
) -> MlpSpec:
    """Build and validate an MlpSpec from (weights, biases) pairs."""
    if not layers:
        raise MlpError("an MLP needs at least one layer")
    frozen = []
    for k, (w, b) in enumerate(layers, start=1):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise MlpError(f"layer {k}: weights must be a 2-D matrix")
        if b.shape[0] != w.shape[0]:
            raise MlpError(
                f"layer {k}: {b.shape[0]} biases for {w.shape[0]} output rows"
            )
        frozen.append(Layer(_freeze(w), _freeze(b)))
    in_features = frozen[0].weights.shape[1]
    spec = MlpSpec(
        in_features=in_features,
        layers=tuple(frozen),
        hidden_activation=hidden_activation,
        output_activation=output_activation,
        input_scaling=(
            InputScaling(_freeze(input_scaling[0]), _freeze(input_scaling[1]))
            if input_scaling is not None
            else None
        ),
    )
    validate_mlp(spec)
    return spec


def validate_mlp(spec: MlpSpec) -> None:
    """Check the dimension chain and value finiteness of a spec."""
    if not spec.layers:
        raise MlpError("an MLP needs at least one layer")
    prev = spec.in_features
    for k, layer in enumerate(spec.layers, start=1):
        out_dim, in_dim = layer.weights.shape
        if in_dim != prev:
            raise MlpError(
                f"layer {k}: input size {in_dim} does not match preceding "
                f"output size {prev}"
            )
        if not np.all(np.isfinite(layer.weights)) or not np.all(np.isfinite(layer.biases)):
            raise MlpError(f"layer {k}: non-finite weight or bias")
        prev = out_dim
    if spec.input_scaling is not None:
        scl = spec.input_scaling
        if scl.offset.shape != (spec.in_features,) or scl.scale.shape != (spec.in_features,):
            raise MlpError(
                "input_scaling offset/scale must each have one entry per input"
            )
        if not np.all(np.isfinite(scl.offset)) or not np.all(np.isfinite(scl.scale)):
            raise MlpError("input_scaling contains non-finite values")


# ---------------------------------------------------------------------------
# JSON weights format
# ---------------------------------------------------------------------------

MLP_FORMAT = "neuropt-mlp-v1"

_TOP_KEYS = {"format", "in_features", "hidden_activation", "output_activation",
             "layers", "input_scaling"}
_LAYER_KEYS = {"weights", "biases"}
_SCALING_KEYS = {"offset", "scale"}


def _parse_activation(value, field: str) -> ActivationKind:
    try:
        return ActivationKind(value)
    except ValueError:
        allowed = "|".join(a.value for a in ActivationKind)
        raise MlpError(f"field '{field}': unknown activation {value!r} (allowed: {allowed})") from None


def mlp_from_dict(doc: dict) -> MlpSpec:
    if not isinstance(doc, dict):
        raise MlpError("weights document must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise MlpError(f"unknown top-level keys: {sorted(unknown)}")
    if doc.get("format") != MLP_FORMAT:
        raise MlpError(f"field 'format': expected {MLP_FORMAT!r}, got {doc.get('format')!r}")
    for key in ("in_features", "hidden_activation", "output_activation", "layers"):
        if key not in doc:
            raise MlpError(f"missing field '{key}'")
    in_features = doc["in_features"]
    if not isinstance(in_features, int) or in_features < 1:
        raise MlpError("field 'in_features': must be a positive integer")
    hidden = _parse_activation(doc["hidden_activation"], "hidden_activation")
    output = _parse_activation(doc["output_activation"], "output_activation")
    raw_layers = doc["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise MlpError("field 'layers': must be a nonempty list")
    pairs = []
    for k, entry in enumerate(raw_layers, start=1):
        if not isinstance(entry, dict):
            raise MlpError(f"layer {k}: must be an object")
        unknown = set(entry) - _LAYER_KEYS
        if unknown:
            raise MlpError(f"layer {k}: unknown keys {sorted(unknown)}")
        try:
            w = np.asarray(entry["weights"], dtype=np.float64)
            b = np.asarray(entry["biases"], dtype=np.float64)
        except (KeyError, ValueError, TypeError) as exc:
            raise MlpError(f"layer {k}: bad weights/biases ({exc})") from None
        if w.ndim != 2:
            raise MlpError(f"layer {k}: weights must be a rectangular matrix")
        pairs.append((w, b))
    scaling = None
    if doc.get("input_scaling") is not None:
        raw = doc["input_scaling"]
        if not isinstance(raw, dict) or set(raw) - _SCALING_KEYS:
            raise MlpError("field 'input_scaling': must contain exactly offset and scale")
        try:
            scaling = (
                np.asarray(raw["offset"], dtype=np.float64),
                np.asarray(raw["scale"], dtype=np.float64),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise MlpError(f"field 'input_scaling': {exc}") from None
    try:
        spec = make_mlp_spec(pairs, hidden, output, scaling)
    except MlpError:
        raise
    if spec.in_features != in_features:
        raise MlpError(
            f"field 'in_features': declared {in_features}, but layer 1 expects "
            f"{spec.in_features} inputs"
        )
    return spec


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def mlp_to_dict(spec: MlpSpec) -> dict:
    doc = {
        "format": MLP_FORMAT,
        "in_features": spec.in_features,
        "hidden_activation": spec.hidden_activation.value,
        "output_activation": spec.output_activation.value,
        "layers": [
            {
                "weights": [[float(v) for v in row] for row in layer.weights],
                "biases": [float(v) for v in layer.biases],
            }
            for layer in spec.layers
        ],
    }
    if spec.input_scaling is not None:
        doc["input_scaling"] = {
            "offset": [float(v) for v in spec.input_scaling.offset],
            "scale": [float(v) for v in spec.input_scaling.scale],
        }
    return doc


def mlp_to_json(spec: MlpSpec) -> str:
    """Serialize with 17-significant-digit decimals (exact double round trip)."""
    lines = ["{"]
    lines.append(f'  "format": "{MLP_FORMAT}",')
    lines.append(f'  "in_features": {spec.in_features},')
    lines.append(f'  "hidden_activation": "{spec.hidden_activation.value}",')
    lines.append(f'  "output_activation": "{spec.output_activation.value}",')
    layer_chunks = []
    for layer in spec.layers:
        rows = ",\n        ".join(
            "[" + ", ".join(_fmt(v) for v in row) + "]" for row in layer.weights
        )
        biases = ", ".join(_fmt(v) for v in layer.biases)
        layer_chunks.append(
            "    {\n      \"weights\": [\n        " + rows + "\n      ],\n"
            "      \"biases\": [" + biases + "]\n    }"
        )
    tail = "," if spec.input_scaling is not None else ""
    lines.append('  "layers": [\n' + ",\n".join(layer_chunks) + "\n  ]" + tail)
    if spec.input_scaling is not None:
        off = ", ".join(_fmt(v) for v in spec.input_scaling.offset)
        scl = ", ".join(_fmt(v) for v in spec.input_scaling.scale)
        lines.append(f'  "input_scaling": {{"offset": [{off}], "scale": [{scl}]}}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def load_mlp(path) -> MlpSpec:
    """Load and validate a weights file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise MlpError(f"cannot read weights file: {exc}") from None
    return loads_mlp(text)


def loads_mlp(text: str) -> MlpSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MlpError(f"weights file is not valid JSON: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return mlp_from_dict(doc)


def save_mlp(spec: MlpSpec, path) -> None:
    validate_mlp(spec)
    text = mlp_to_json(spec)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise MlpError(f"cannot write weights file: {exc}") from None


# ---------------------------------------------------------------------------
# Embedding and direct inference
# ---------------------------------------------------------------------------

def _apply_activation(h: sg.ExprRef, kind: ActivationKind) -> sg.ExprRef:
    if kind is ActivationKind.IDENTITY:
        return h
    return sg.apply_unary(_ACT_TO_OP[kind], h)


def embed_mlp(spec: MlpSpec, x: sg.ExprRef) -> sg.ExprRef:
    """Recreate the network symbolically on input `x` with copied weights.

    `x` must be a column vector of length ``in_features``.  The result is an
    ordinary expression: derivatives, lowering, and substitution all apply.
    """
    validate_mlp(spec)
    if x.shape != (spec.in_features, 1):
        raise sg.ShapeError(
            f"embed_mlp: input has shape {x.shape}, expected ({spec.in_features}, 1)"
        )
    g = x.graph
    h = x
    if spec.input_scaling is not None:
        off = g.constant(spec.input_scaling.offset.reshape(-1, 1))
        scl = g.constant(spec.input_scaling.scale.reshape(-1, 1))
        h = sg.apply_binary(sg.OpKind.MUL, sg.apply_binary(sg.OpKind.SUB, h, off), scl)
    last = len(spec.layers) - 1
    for k, layer in enumerate(spec.layers):
        w = g.constant(layer.weights)
        b = g.constant(layer.biases.reshape(-1, 1))
        h = sg.apply_binary(sg.OpKind.ADD, sg.matmul(w, h), b)
        kind = spec.output_activation if k == last else spec.hidden_activation
        h = _apply_activation(h, kind)
    return h


def _act_scalar(v: float, kind: ActivationKind) -> float:
    if kind is ActivationKind.TANH:
        return math.tanh(v)
    if kind is ActivationKind.RELU:
        return v if v > 0.0 else 0.0
    if kind is ActivationKind.SIGMOID:
        if v >= 0.0:
            return 1.0 / (1.0 + math.exp(-v))
        e = math.exp(v)
        return e / (1.0 + e)
    return v


def eval_mlp(spec: MlpSpec, x: Sequence[float]) -> np.ndarray:
    """Plain loop-based forward pass; the numeric oracle for embed_mlp."""
    validate_mlp(spec)
    vec = [float(v) for v in np.asarray(x, dtype=np.float64).reshape(-1)]
    if len(vec) != spec.in_features:
        raise MlpError(
            f"eval_mlp: input length {len(vec)} does not match in_features "
            f"{spec.in_features}"
        )
    if spec.input_scaling is not None:
        off = spec.input_scaling.offset
        scl = spec.input_scaling.scale
        vec = [(v - float(off[i])) * float(scl[i]) for i, v in enumerate(vec)]
    last = len(spec.layers) - 1
    for k, layer in enumerate(spec.layers):
        w, b = layer.weights, layer.biases
        out = []
        for i in range(w.shape[0]):
            acc = 0.0
            row = w[i]
            for j in range(w.shape[1]):
                acc += float(row[j]) * vec[j]
            acc += float(b[i])
            out.append(acc)
        kind = spec.output_activation if k == last else spec.hidden_activation
        vec = [_act_scalar(v, kind) for v in out]
    return np.array(vec, dtype=np.float64)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise FitError("learning_rate must be positive")
        if self.epochs < 1:
            raise FitError("epochs must be at least 1")
        if self.batch_size < 1:
            raise FitError("batch_size must be at least 1")


@dataclass(frozen=True)
class MlpArchitecture:
    in_features: int
    hidden: tuple[int, ...]
    out_features: int
    hidden_activation: ActivationKind = ActivationKind.TANH
    output_activation: ActivationKind = ActivationKind.IDENTITY

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.in_features, *self.hidden, self.out_features]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]


def _init_weights(arch: MlpArchitecture, rng: np.random.Generator):
    weights, biases = [], []
    for out_dim, in_dim in arch.layer_dims:
        bound = 1.0 / math.sqrt(in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return weights, biases


def _build_train_function(arch: MlpArchitecture, batch: int) -> tuple[sg.SymFunction, int]:
    """Symbolic loss + weight gradients for one mini-batch of fixed size.

    Inputs: X (in, B), Y (out, B), then W_k, b_k per layer.
    Outputs: loss, then dW_k, db_k in the same order.
    """
    g = sg.ExprGraph()
    X = g.symbol("X", arch.in_features, batch)
    Y = g.symbol("Y", arch.out_features, batch)
    ones_row = g.constant(np.ones((1, batch)))
    params = []
    h = X
    last = len(arch.layer_dims) - 1
    for k, (out_dim, in_dim) in enumerate(arch.layer_dims):
        W = g.symbol(f"W{k}", out_dim, in_dim)
        b = g.symbol(f"b{k}", out_dim, 1)
        params.extend([W, b])
        h = sg.matmul(W, h) + sg.matmul(b, ones_row)
        kind = arch.output_activation if k == last else arch.hidden_activation
        h = _apply_activation(h, kind)
    resid = h - Y
    loss = sg.sumsq(resid) * (1.0 / (batch * arch.out_features))
    grads = sg.gradients(loss, params)
    fn = sg.SymFunction([X, Y, *params], [loss, *grads])
    return fn, len(params)


def fit_mlp(
    samples: Sequence[tuple[Sequence[float], Sequence[float]]],
    arch: MlpArchitecture,
    cfg: TrainConfig,
) -> tuple[MlpSpec, float]:
    """Mini-batch gradient descent on mean squared error.

    Weights start uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from a
    seeded PCG64 generator, biases at zero; the gradient comes from the
    symbolic graph with the weights treated as symbols.  Deterministic for a
    fixed seed.  Returns the trained spec and its full-sample MSE.
    """
    if not samples:
        raise FitError("fit_mlp needs at least one sample")
    X = np.array([np.asarray(s[0], dtype=np.float64).reshape(-1) for s in samples]).T
    Y = np.array([np.asarray(s[1], dtype=np.float64).reshape(-1) for s in samples]).T
    if X.shape[0] != arch.in_features:
        raise FitError(
            f"samples have {X.shape[0]} inputs, architecture expects {arch.in_features}"
        )
    if Y.shape[0] != arch.out_features:
        raise FitError(
            f"samples have {Y.shape[0]} targets, architecture expects {arch.out_features}"
        )
    n = X.shape[1]
    batch = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    weights, biases = _init_weights(arch, rng)
    fn, n_params = _build_train_function(arch, batch)

    steps_per_epoch = n // batch
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n) if steps_per_epoch > 1 else np.arange(n)
        for s in range(steps_per_epoch):
            idx = perm[s * batch: (s + 1) * batch]
            args = [X[:, idx], Y[:, idx]]
            for W, b in zip(weights, biases):
                args.extend([W, b.reshape(-1, 1)])
            outs = fn(*args)
            loss = float(outs[0][0, 0])
            if not math.isfinite(loss):
                raise FitError(
                    "training loss became non-finite; try a smaller learning_rate"
                )
            gi = 1
            for k in range(len(weights)):
                weights[k] = weights[k] - lr * outs[gi]
                biases[k] = biases[k] - lr * outs[gi + 1].reshape(-1)
                gi += 2

    spec = make_mlp_spec(
        list(zip(weights, biases)),
        hidden_activation=arch.hidden_activation,
        output_activation=arch.output_activation,
    )
    final_mse = float(np.mean((_forward_batch(spec, X) - Y) ** 2))
    return spec, final_mse


def _forward_batch(spec: MlpSpec, X: np.ndarray) -> np.ndarray:
    """Vectorized forward pass over columns of X (internal reporting helper)."""
    h = X
    if spec.input_scaling is not None:
        h = (h - spec.input_scaling.offset[:, None]) * spec.input_scaling.scale[:, None]
    last = len(spec.layers) - 1
    for k, layer in enumerate(spec.layers):
        h = layer.weights @ h + layer.biases[:, None]
        kind = spec.output_activation if k == last else spec.hidden_activation
        if kind is ActivationKind.TANH:
            h = np.tanh(h)
        elif kind is ActivationKind.RELU:
            h = np.maximum(h, 0.0)
        elif kind is ActivationKind.SIGMOID:
            with np.errstate(over="ignore"):
                h = 1.0 / (1.0 + np.exp(-h))
    return h


def with_input_scaling(spec: MlpSpec, offset: np.ndarray, scale: np.ndarray) -> MlpSpec:
    """Return a copy of `spec` with the given input normalization attached."""
    out = replace(
        spec,
        input_scaling=InputScaling(_freeze(np.asarray(offset)), _freeze(np.asarray(scale))),
    )
    validate_mlp(out)
    return out


def check_gradients(
    spec: MlpSpec,
    trials: int = 100,
    seed: int = 0,
    rtol: float = 1e-6,
    step: float = 1e-5,
) -> tuple[bool, float]:
    """Compare the embedded network's symbolic Jacobian against central
    finite differences at random inputs.

    Points are drawn over the network's natural domain (the preimage of
    [-1, 1] when input scaling is attached, [-2, 2] otherwise).  Returns
    (all trials within rtol, worst relative error); the relative error uses
    a unit floor in the denominator.
    """
    if trials < 1:
        raise MlpError("check_gradients needs at least one trial")
    g = sg.ExprGraph()
    x = g.symbol("x", spec.in_features, 1)
    y = embed_mlp(spec, x)
    fn = sg.SymFunction([x], [y, sg.jacobian(y, x)])
    if spec.input_scaling is not None:
        center = spec.input_scaling.offset
        half = 1.0 / spec.input_scaling.scale
        lo, hi = center - np.abs(half), center + np.abs(half)
    else:
        lo = np.full(spec.in_features, -2.0)
        hi = np.full(spec.in_features, 2.0)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x0 = rng.uniform(lo, hi).reshape(-1, 1)
        jac = fn(x0)[1]
        fd = np.zeros_like(jac)
        for j in range(spec.in_features):
            e = np.zeros_like(x0)
            e[j, 0] = step
            fd[:, j] = (
                sg.evaluate(fn, [x0 + e])[0] - sg.evaluate(fn, [x0 - e])[0]
            ).ravel() / (2.0 * step)
        denom = np.maximum(1.0, np.abs(jac))
        worst = max(worst, float(np.max(np.abs(jac - fd) / denom)))
    return worst <= rtol, worst
