"""Small differentiable models on a minimal reverse-mode tape.

The tape supports exactly what the two model kinds need: matrix multiply,
transpose, bias add, relu/tanh, softmax cross-entropy and squared error.
Weights are stored (out_features, in_features) so that N:M groups along the
innermost axis run over each output's reduction dimension.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, DomainError

ParamSet = dict[str, np.ndarray]

MODEL_KINDS = ("linear_regression", "mlp_classifier")
ACTIVATIONS = ("relu", "tanh")
DATA_KINDS = ("regression", "blobs")


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=()):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = None


def _matmul(a: _Node, b: _Node) -> _Node:
    out = _Node(a.value @ b.value, (a, b))

    def bw(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    out.backward_fn = bw
    return out


def _transpose(a: _Node) -> _Node:
    out = _Node(a.value.T, (a,))

    def bw(g):
        a.grad += g.T

    out.backward_fn = bw
    return out


def _add_bias(x: _Node, b: _Node) -> _Node:
    out = _Node(x.value + b.value, (x, b))

    def bw(g):
        x.grad += g
        b.grad += g.sum(axis=0)

    out.backward_fn = bw
    return out


def _relu(x: _Node) -> _Node:
    out = _Node(np.maximum(x.value, 0.0), (x,))

    def bw(g):
        # subgradient at exactly 0 is 0
        x.grad += g * (x.value > 0.0)

    out.backward_fn = bw
    return out


def _tanh(x: _Node) -> _Node:
    t = np.tanh(x.value)
    out = _Node(t, (x,))

    def bw(g):
        x.grad += g * (1.0 - t * t)

    out.backward_fn = bw
    return out


def _softmax_cross_entropy(logits: _Node, labels: np.ndarray) -> _Node:
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    expz = np.exp(z)
    sumexp = expz.sum(axis=1, keepdims=True)
    probs = expz / sumexp
    n = logits.value.shape[0]
    picked = z[np.arange(n), labels] - np.log(sumexp[:, 0])
    out = _Node(np.float64(-picked.mean()), (logits,))

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        logits.grad += g * d / n

    out.backward_fn = bw
    return out


def _squared_error(pred: _Node, target: np.ndarray) -> _Node:
    r = pred.value - target
    n = pred.value.shape[0]
    out = _Node(np.float64(0.5 * np.sum(r * r) / n), (pred,))

    def bw(g):
        pred.grad += g * r / n

    out.backward_fn = bw
    return out


def _backprop(root: _Node) -> None:
    topo, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    for node in topo:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.backward_fn is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# model specs and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: layer sizes plus the hidden activation."""

    kind: str
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError(f"layer_sizes needs >= 2 positive extents, got {sizes}")
        if self.kind == "linear_regression" and len(sizes) != 2:
            raise ConfigError("linear_regression takes exactly [in, out] layer sizes")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, weights stored (out, in)."""
    shapes: dict[str, tuple[int, ...]] = {}
    sizes = spec.layer_sizes
    for i in range(1, len(sizes)):
        shapes[f"fc{i}.weight"] = (sizes[i], sizes[i - 1])
        shapes[f"fc{i}.bias"] = (sizes[i],)
    return shapes


def init_params(spec: ModelSpec, seed) -> ParamSet:
    """Seeded scaled-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
    return params


def _check_params(spec: ModelSpec, params: ParamSet) -> None:
    expected = param_shapes(spec)
    if set(params) != set(expected):
        raise DimensionError(
            f"parameter names {sorted(params)} do not match spec {sorted(expected)}"
        )
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {np.shape(params[name])}")


def _check_batch(spec: ModelSpec, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if inputs.ndim != 2 or inputs.shape[1] != spec.layer_sizes[0]:
        raise DimensionError(
            f"inputs must be [batch, {spec.layer_sizes[0]}], got {inputs.shape}"
        )
    if spec.kind == "mlp_classifier":
        labels = np.asarray(targets)
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise DimensionError("classifier targets must be a [batch] vector of class ids")
        labels = labels.astype(np.int64)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= spec.layer_sizes[-1]:
            raise DimensionError("class id outside the output range")
        return labels
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape != (inputs.shape[0], spec.layer_sizes[-1]):
        raise DimensionError(
            f"regression targets must be [batch, {spec.layer_sizes[-1]}], got {t.shape}"
        )
    return t


def _forward(spec: ModelSpec, params: ParamSet, batch) -> tuple[_Node, dict[str, _Node]]:
    inputs, targets = batch
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = _check_batch(spec, inputs, targets)
    _check_params(spec, params)
    nodes = {name: _Node(np.asarray(value, dtype=np.float64)) for name, value in params.items()}
    h = _Node(inputs)
    for i in range(1, spec.n_layers + 1):
        h = _add_bias(_matmul(h, _transpose(nodes[f"fc{i}.weight"])), nodes[f"fc{i}.bias"])
        if i < spec.n_layers:
            h = _relu(h) if spec.activation == "relu" else _tanh(h)
    if spec.kind == "mlp_classifier":
        loss = _softmax_cross_entropy(h, targets)
    else:
        loss = _squared_error(h, targets)
    return loss, nodes


def forward_loss(spec: ModelSpec, params: ParamSet, batch) -> float:
    """Mean loss over the batch: softmax cross-entropy or half squared error."""
    loss, _ = _forward(spec, params, batch)
    return float(loss.value)


def loss_and_grad(spec: ModelSpec, params: ParamSet, batch) -> tuple[float, ParamSet]:
    """Loss plus gradients for every parameter, in one forward/backward pass."""
    loss, nodes = _forward(spec, params, batch)
    _backprop(loss)
    return float(loss.value), {name: node.grad for name, node in nodes.items()}


def grad(spec: ModelSpec, params: ParamSet, batch) -> ParamSet:
    """Gradients of the mean batch loss with respect to every parameter."""
    return loss_and_grad(spec, params, batch)[1]


@dataclass(frozen=True)
class FDReport:
    """Finite-difference comparison across parameter coordinates."""

    max_rel_error: float
    passed: bool
    offenders: tuple[tuple[str, int, float], ...]


def finite_difference_check(
    spec: ModelSpec,
    params: ParamSet,
    batch,
    h: float = 1e-5,
    tol: float = 1e-5,
) -> FDReport:
    """Compare analytic gradients against central differences on every coordinate.

    The per-coordinate error is |analytic - numeric| relative to the larger of
    the two magnitudes, floored at one so near-zero coordinates are judged on
    absolute error.  Offenders above ``tol`` are listed by (name, flat index).
    """
    if h <= 0:
        raise DomainError("finite-difference step h must be positive")
    analytic = grad(spec, params, batch)
    max_rel = 0.0
    offenders: list[tuple[str, int, float]] = []
    for name, base in params.items():
        flat = np.asarray(base, dtype=np.float64).ravel()
        for idx in range(flat.size):
            sides = []
            for sign in (1.0, -1.0):
                shifted = flat.copy()
                shifted[idx] += sign * h
                probe = dict(params)
                probe[name] = shifted.reshape(np.shape(base))
                sides.append(forward_loss(spec, probe, batch))
            numeric = (sides[0] - sides[1]) / (2.0 * h)
            a = float(np.asarray(analytic[name]).ravel()[idx])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > max_rel:
                max_rel = rel
            if rel > tol:
                offenders.append((name, idx, rel))
    return FDReport(max_rel_error=max_rel, passed=max_rel <= tol, offenders=tuple(offenders))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """In-memory supervised dataset with a batching size."""

    inputs: np.ndarray
    targets: np.ndarray
    batch_size: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if inputs.ndim != 2:
            raise DimensionError(f"inputs must be 2-d, got shape {inputs.shape}")
        if targets.shape[0] != inputs.shape[0]:
            raise DimensionError("inputs and targets disagree on sample count")
        if not (1 <= self.batch_size <= inputs.shape[0]):
            raise ConfigError(
                f"need n_samples >= batch_size >= 1, got {inputs.shape[0]} and {self.batch_size}"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def full_batch(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs, self.targets


def gen_synthetic(
    kind: str,
    n_samples: int,
    n_features: int,
    n_classes: int = 2,
    noise_std: float = 0.0,
    seed: int = 0,
    batch_size: int = 32,
) -> Dataset:
    """Deterministic synthetic data: Gaussian blobs or a hidden linear map."""
    if kind not in DATA_KINDS:
        raise ConfigError(f"unknown synthetic data kind {kind!r}")
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        if n_classes < 2:
            raise ConfigError("blobs needs n_classes >= 2")
        centers = 3.0 * rng.standard_normal((n_classes, n_features))
        labels = np.arange(n_samples) % n_classes
        inputs = centers[labels] + noise_std * rng.standard_normal((n_samples, n_features))
        targets = labels.astype(np.float64)
    else:
        inputs = rng.standard_normal((n_samples, n_features))
        hidden = rng.standard_normal((n_features, 1))
        targets = inputs @ hidden
        if noise_std > 0:
            targets = targets + noise_std * rng.standard_normal(targets.shape)
    return Dataset(inputs=inputs, targets=targets, batch_size=min(batch_size, n_samples))


def batch_iterator(dataset: Dataset, seed):
    """Endless seeded epoch shuffles; tail samples that do not fill a batch are dropped."""
    rng = np.random.default_rng(seed)
    n, b = dataset.n_samples, dataset.batch_size
    per_epoch = n // b
    while True:
        order = rng.permutation(n)
        for i in range(per_epoch):
            idx = order[i * b : (i + 1) * b]
            yield dataset.inputs[idx], dataset.targets[idx]


def save_csv(dataset: Dataset, path) -> None:
    """Write the dataset as CSV with a header row; target column(s) come last."""
    targets = dataset.targets if dataset.targets.ndim == 2 else dataset.targets[:, None]
    header = [f"x{i}" for i in range(dataset.n_features)] + [
        f"y{j}" for j in range(targets.shape[1])
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row_x, row_y in zip(dataset.inputs, targets):
            writer.writerow([repr(float(v)) for v in row_x] + [repr(float(v)) for v in row_y])


def load_csv(path, n_targets: int = 1, batch_size: int = 32, target_kind: str = "value") -> Dataset:
    """Read a CSV dataset written by :func:`save_csv` (targets are the last columns).

    ``target_kind`` "class" squeezes a single target column to a label vector.
    """
    if n_targets < 1:
        raise ConfigError("n_targets must be >= 1")
    if target_kind not in ("value", "class"):
        raise ConfigError(f"unknown target kind {target_kind!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) <= n_targets:
            raise ConfigError(f"CSV {path} needs a header and at least one feature column")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ConfigError(f"CSV {path} has no data rows")
    data = np.asarray(rows, dtype=np.float64)
    inputs, targets = data[:, :-n_targets], data[:, -n_targets:]
    if target_kind == "class":
        if n_targets != 1:
            raise ConfigError("class targets use exactly one column")
        targets = targets[:, 0]
    return Dataset(inputs=inputs, targets=targets, batch_size=min(batch_size, len(rows)))
