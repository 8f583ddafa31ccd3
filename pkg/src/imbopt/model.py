"""Classifiers and the per-class decomposition of loss and gradient.

Parameters live in one flat float64 vector. Layout is layer-major: for
layer k the weight matrix ``W{k}`` of shape (fan_in, fan_out) in row-major
order, then the bias ``b{k}`` of length fan_out. Logits are ``h @ W + b``.

Two normalization conventions exist and are always explicit:

* ``"total"``: per-class quantities divide the class sum by the dataset size
  n, so they add up to the full objective (f = sum_l f^(l)).
* ``"batch"``: divide by the number of examples actually used (the mean over
  a per-class batch).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .tensor_core import EPS_NORM, DomainError, SeededRng

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    n_classes: int
    hidden: tuple[int, ...] = ()
    activation: str = "relu"
    init_scale: float = 1.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise DomainError("need at least two classes")
        if self.input_dim < 1 or any(w < 1 for w in self.hidden):
            raise DomainError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.n_classes)

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        w = self.widths
        for k in range(len(w) - 1):
            out.append((f"W{k}", (w[k], w[k + 1])))
            out.append((f"b{k}", (w[k + 1],)))
        return out

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes)


def init_params(spec: ModelSpec, rng: SeededRng) -> np.ndarray:
    """Zero biases; weights i.i.d. N(0, (init_scale / sqrt(fan_in))^2)."""
    parts = []
    for name, shape in spec.shapes:
        if name.startswith("W"):
            std = spec.init_scale / math.sqrt(shape[0])
            parts.append(std * rng.standard_normal(shape).ravel())
        else:
            parts.append(np.zeros(shape).ravel())
    return np.concatenate(parts)


def unflatten(spec: ModelSpec, x: np.ndarray) -> dict[str, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.size != spec.n_params:
        raise DomainError(f"expected {spec.n_params} parameters, got {x.size}")
    out, pos = {}, 0
    for name, shape in spec.shapes:
        size = math.prod(shape)
        out[name] = x[pos:pos + size].reshape(shape)
        pos += size
    return out


def build_loss_graph(spec: ModelSpec, params, features, labels, normalizer: float) -> Graph:
    """Graph of ``sum_i f_i(x) / normalizer`` over the given rows."""
    g = Graph()
    nodes = {name: g.parameter(name, params[name]) for name, _ in spec.shapes}
    h = g.constant(features)
    n_layers = len(spec.widths) - 1
    for k in range(n_layers):
        h = g.bias_add(g.matmul(h, nodes[f"W{k}"]), nodes[f"b{k}"])
        if k < n_layers - 1:
            h = g.relu(h) if spec.activation == "relu" else g.tanh(h)
    per_example = g.softmax_ce(h, labels)
    g.subset_sum(per_example, None, normalizer)
    return g


def logits(spec: ModelSpec, x: np.ndarray, features: np.ndarray) -> np.ndarray:
    p = unflatten(spec, x)
    h = np.asarray(features, dtype=np.float64)
    n_layers = len(spec.widths) - 1
    for k in range(n_layers):
        h = h @ p[f"W{k}"] + p[f"b{k}"]
        if k < n_layers - 1:
            h = np.maximum(h, 0.0) if spec.activation == "relu" else np.tanh(h)
    return h


def predict(spec: ModelSpec, x: np.ndarray, features: np.ndarray) -> np.ndarray:
    return np.argmax(logits(spec, x, features), axis=1)


def _normalizer(convention: str, n_used: int, n_total: int | None) -> float:
    if convention == "total":
        if n_total is None:
            raise ValueError("the 'total' convention needs n_total")
        return float(n_total)
    if convention == "batch":
        return float(n_used)
    raise ValueError(f"unknown normalization convention {convention!r}")


def loss_and_gradient(spec: ModelSpec, x, features, labels, normalizer: float) -> tuple[float, np.ndarray]:
    g = build_loss_graph(spec, unflatten(spec, x), features, labels, normalizer)
    value = g.forward()
    return value, g.backward().flat()


def per_class_loss(spec: ModelSpec, x, dataset, l: int) -> float:
    """Sum of per-example losses over class ``l`` divided by the dataset size."""
    if not 0 <= l < spec.n_classes:
        raise DomainError(f"class {l} outside [0, {spec.n_classes - 1}]")
    idx = dataset.class_indices[l]
    if idx.size == 0:
        return 0.0
    g = build_loss_graph(spec, unflatten(spec, x), dataset.features[idx], dataset.labels[idx], dataset.n)
    return g.forward()


def per_class_gradient(
    spec: ModelSpec,
    x,
    features,
    labels,
    subset,
    convention: str,
    n_total: int | None = None,
    on_empty: str = "skip",
) -> np.ndarray | None:
    """Gradient of the class loss over ``subset`` (rows of one class).

    ``convention`` picks the divisor: ``"total"`` uses ``n_total``,
    ``"batch"`` uses ``len(subset)``. An empty subset returns None when
    ``on_empty="skip"`` and raises otherwise.
    """
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        if on_empty == "skip":
            return None
        raise DomainError("empty per-class subset")
    ys = np.asarray(labels)[subset]
    if np.any(ys != ys[0]):
        raise DomainError("per-class subset mixes labels")
    norm = _normalizer(convention, subset.size, n_total)
    return loss_and_gradient(spec, x, np.asarray(features)[subset], ys, norm)[1]


def full_gradient(spec: ModelSpec, x, dataset) -> np.ndarray:
    return loss_and_gradient(spec, x, dataset.features, dataset.labels, dataset.n)[1]


def full_loss(spec: ModelSpec, x, dataset) -> float:
    g = build_loss_graph(spec, unflatten(spec, x), dataset.features, dataset.labels, dataset.n)
    return g.forward()


@dataclass
class PerClassGradients:
    """Per-class gradient vectors g_l (one row each) with derived geometry."""

    grads: np.ndarray
    losses: np.ndarray | None = None
    norms: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grads = np.atleast_2d(np.asarray(self.grads, dtype=np.float64))
        self.norms = np.sqrt(np.einsum("ij,ij->i", self.grads, self.grads))

    @property
    def n_classes(self) -> int:
        return self.grads.shape[0]

    @property
    def total(self) -> np.ndarray:
        return self.grads.sum(axis=0)

    def degenerate(self, eps: float = EPS_NORM) -> np.ndarray:
        return self.norms <= eps

    def cosines(self, eps: float = EPS_NORM) -> np.ndarray:
        """Pairwise cosine matrix; NaN where either norm is degenerate."""
        ok = ~self.degenerate(eps)
        safe = np.where(ok, self.norms, 1.0)
        c = (self.grads @ self.grads.T) / np.outer(safe, safe)
        c = np.clip(c, -1.0, 1.0)
        c[~ok, :] = np.nan
        c[:, ~ok] = np.nan
        return c


def per_class_gradients(spec: ModelSpec, x, dataset, with_losses: bool = True) -> PerClassGradients:
    """Full-batch per-class gradients under the ``"total"`` convention."""
    m = spec.n_params
    grads = np.zeros((spec.n_classes, m))
    losses = np.zeros(spec.n_classes)
    for l in range(spec.n_classes):
        idx = dataset.class_indices[l]
        if idx.size == 0:
            continue
        losses[l], grads[l] = loss_and_gradient(spec, x, dataset.features[idx], dataset.labels[idx], dataset.n)
    return PerClassGradients(grads, losses if with_losses else None)


def save_checkpoint(path, spec: ModelSpec, x: np.ndarray) -> None:
    """JSON checkpoint: version, spec, shape manifest and the flat parameter list.

    Floats are written with ``repr`` precision so a load round-trips exactly.
    """
    doc = {
        "format": "imbopt-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": {
            "input_dim": spec.input_dim,
            "n_classes": spec.n_classes,
            "hidden": list(spec.hidden),
            "activation": spec.activation,
            "init_scale": spec.init_scale,
        },
        "layout": [{"name": n, "shape": list(s)} for n, s in spec.shapes],
        "params": [float(v) for v in np.asarray(x, dtype=np.float64)],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "imbopt-checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint {doc.get('format')!r} v{doc.get('version')!r}")
    s = doc["spec"]
    spec = ModelSpec(s["input_dim"], s["n_classes"], tuple(s["hidden"]), s["activation"], s["init_scale"])
    expected = [(n, tuple(sh)) for n, sh in ((e["name"], e["shape"]) for e in doc["layout"])]
    if expected != spec.shapes:
        raise ValueError("checkpoint layout does not match its spec")
    x = np.asarray(doc["params"], dtype=np.float64)
    unflatten(spec, x)
    return spec, x

