"""Minimal reverse-mode automatic differentiation on a static graph.

A :class:`Graph` is built by calling its op methods, evaluated once by
:meth:`Graph.forward` and differentiated by :meth:`Graph.backward`. Nodes are
appended in creation order, which is therefore a valid topological order.
Graphs are single use: rebuild one per batch.

Supported ops: matmul, bias_add, relu, tanh, elementwise mul, scale,
fused softmax-cross-entropy per example, and subset sum with a
caller-supplied normalizer. ReLU's subgradient at 0 is 0.
"""

from __future__ import annotations

import warnings
from typing import Callable, Mapping

import numpy as np

from .tensor_core import DomainError, SeededRng


class GraphStateError(RuntimeError):
    pass


class Node:
    __slots__ = ("op", "inputs", "attrs", "value", "grad", "name")

    def __init__(self, op: str, inputs: tuple, attrs: dict | None = None, name: str | None = None):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs or {}
        self.value = None
        self.grad = None
        self.name = name


class GradientRecord(dict):
    """Parameter name -> gradient array, in parameter registration order."""

    def flat(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.values()])


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.output: Node | None = None
        self.flags: set[str] = set()
        self._evaluated = False
        self._used = False
        self._index: dict[Node, int] = {}

    # -- construction -------------------------------------------------------
    def _add(self, op, inputs=(), attrs=None, name=None) -> Node:
        if self._evaluated:
            raise GraphStateError("graph already evaluated; build a new one")
        for n in inputs:
            if not isinstance(n, Node) or n not in self._index:
                raise GraphStateError("input node does not belong to this graph")
        node = Node(op, tuple(inputs), attrs, name)
        self.nodes.append(node)
        self._index[node] = len(self.nodes) - 1
        return node

    def parameter(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        node = self._add("param", attrs={"value": np.asarray(value, dtype=np.float64)}, name=name)
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        return self._add("const", attrs={"value": np.asarray(value, dtype=np.float64)})

    def matmul(self, a: Node, b: Node) -> Node:
        return self._add("matmul", (a, b))

    def bias_add(self, a: Node, b: Node) -> Node:
        return self._add("bias_add", (a, b))

    def relu(self, a: Node) -> Node:
        return self._add("relu", (a,))

    def tanh(self, a: Node) -> Node:
        return self._add("tanh", (a,))

    def mul(self, a: Node, b: Node) -> Node:
        return self._add("mul", (a, b))

    def scale(self, a: Node, gamma: float) -> Node:
        return self._add("scale", (a,), {"gamma": float(gamma)})

    def softmax_ce(self, logits: Node, labels) -> Node:
        """Per-example cross-entropy of integer ``labels`` under softmax(logits)."""
        labels = np.asarray(labels, dtype=np.int64)
        return self._add("softmax_ce", (logits,), {"labels": labels})

    def subset_sum(self, v: Node, subset=None, normalizer: float = 1.0) -> Node:
        """Scalar ``sum(v[subset]) / normalizer``; ``subset=None`` takes every entry."""
        if normalizer <= 0:
            raise DomainError("normalizer must be positive")
        idx = None if subset is None else np.asarray(subset, dtype=np.int64)
        return self._add("subset_sum", (v,), {"subset": idx, "normalizer": float(normalizer)})

    # -- evaluation ---------------------------------------------------------
    def forward(self) -> float:
        if self._evaluated:
            raise GraphStateError("graph already evaluated; build a new one")
        if not self.nodes:
            raise GraphStateError("empty graph")
        for node in self.nodes:
            node.value = _FORWARD[node.op](self, node, *[n.value for n in node.inputs])
        out = self.nodes[-1]
        if np.ndim(out.value) != 0:
            raise GraphStateError("last node must be a scalar loss")
        self.output = out
        self._evaluated = True
        return float(out.value)

    def backward(self) -> GradientRecord:
        if not self._evaluated:
            raise GraphStateError("backward called before forward")
        if self._used:
            raise GraphStateError("backward already called on this graph")
        self._used = True
        for node in self.nodes:
            node.grad = None
        self.output.grad = np.float64(1.0)
        for node in reversed(self.nodes):
            if node.grad is None or not node.inputs:
                continue
            contribs = _BACKWARD[node.op](node, *[n.value for n in node.inputs])
            for inp, g in zip(node.inputs, contribs):
                if g is None:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g
        rec = GradientRecord()
        for name, node in self.params.items():
            g = node.grad
            rec[name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64)
        return rec


def _softmax_ce_forward(graph, node, z):
    labels = node.attrs["labels"]
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DomainError("softmax_ce expects (batch, classes) logits and one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise DomainError(f"label out of range [0, {z.shape[1] - 1}]")
    zmax = z.max(axis=1, keepdims=True) if z.shape[0] else np.zeros((0, 1))
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    node.attrs["probs"] = np.exp(shifted - lse[:, None])
    return lse - shifted[np.arange(z.shape[0]), labels]


def _subset_sum_forward(graph, node, v):
    idx = node.attrs["subset"]
    vals = v if idx is None else v[idx]
    if vals.size == 0:
        graph.flags.add("empty_subset")
        warnings.warn("loss over an empty subset evaluates to 0", RuntimeWarning, stacklevel=3)
        return np.float64(0.0)
    return np.float64(vals.sum() / node.attrs["normalizer"])


_FORWARD: dict[str, Callable] = {
    "param": lambda g, n: n.attrs["value"],
    "const": lambda g, n: n.attrs["value"],
    "matmul": lambda g, n, a, b: a @ b,
    "bias_add": lambda g, n, a, b: a + b,
    "relu": lambda g, n, a: np.maximum(a, 0.0),
    "tanh": lambda g, n, a: np.tanh(a),
    "mul": lambda g, n, a, b: a * b,
    "scale": lambda g, n, a: n.attrs["gamma"] * a,
    "softmax_ce": _softmax_ce_forward,
    "subset_sum": _subset_sum_forward,
}


def _bias_add_backward(node, a, b):
    g = node.grad
    gb = g.reshape(-1, *b.shape).sum(axis=0) if g.ndim > b.ndim else g
    return g, gb


def _softmax_ce_backward(node, z):
    probs = node.attrs["probs"].copy()
    labels = node.attrs["labels"]
    probs[np.arange(z.shape[0]), labels] -= 1.0
    return (probs * node.grad[:, None],)


def _subset_sum_backward(node, v):
    idx = node.attrs["subset"]
    scale = node.grad / node.attrs["normalizer"]
    if idx is None:
        return (np.full(v.shape, scale),)
    gv = np.zeros(v.shape)
    np.add.at(gv, idx, scale)  # duplicates accumulate
    return (gv,)


_BACKWARD: dict[str, Callable] = {
    "matmul": lambda n, a, b: (n.grad @ b.T, a.T @ n.grad),
    "bias_add": _bias_add_backward,
    "relu": lambda n, a: (n.grad * (a > 0.0),),
    "tanh": lambda n, a: (n.grad * (1.0 - n.value**2),),
    "mul": lambda n, a, b: (n.grad * b, n.grad * a),
    "scale": lambda n, a: (n.attrs["gamma"] * n.grad,),
    "softmax_ce": _softmax_ce_backward,
    "subset_sum": _subset_sum_backward,
}


def finite_difference_check(
    build: Callable[[Mapping[str, np.ndarray]], Graph],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    n_coords: int = 50,
    rng: SeededRng | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``build(params)`` must return a fresh, unevaluated graph whose loss depends
    on ``params``. Coordinates are sampled uniformly without replacement (all of
    them when there are fewer than ``n_coords``).
    """
    if not (1e-8 <= h <= 1e-3):
        raise DomainError(f"step h={h!r} outside [1e-8, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    g = build(params)
    g.forward()
    grads = g.backward()

    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    rng = rng or SeededRng(0, "theory")
    if len(coords) > n_coords:
        pick = rng.permutation(len(coords))[:n_coords]
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        p = params[name].reshape(-1)
        orig = p[i]
        p[i] = orig + h
        f_plus = build(params).forward()
        p[i] = orig - h
        f_minus = build(params).forward()
        p[i] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        an = grads[name].reshape(-1)[i]
        worst = max(worst, abs(fd - an) / (abs(an) + 1e-8))
    return worst
