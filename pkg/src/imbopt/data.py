"""Synthetic imbalanced datasets and per-class batch planning.

Class 0 is always the (weak) majority. Three batch schemes are provided:

* ``uniform``: plain shuffled mini-batches over the whole set (SGD).
* ``per-class-ratio``: every class is cut into the same number N_b of
  batches, so per-class batch sizes follow the imbalance (PCNSGD, PCNSGD+R).
* ``oversampled-equal``: every class contributes exactly ``s`` examples per
  step; an epoch lasts N_b^(0) steps and smaller classes are reshuffled and
  re-cut whenever their batches run out (SGD+O, PCNSGD+O).

Remainders are dropped so per-class batch sizes stay constant in an epoch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Sequence

import numpy as np

from .tensor_core import DomainError, SeededRng

TEST_PER_CLASS_CAP = 200


class InfeasiblePlanError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DomainError("features must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DomainError("label outside [0, n_classes)")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @cached_property
    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == l) for l in range(self.n_classes)]

    @property
    def counts(self) -> np.ndarray:
        return np.array([idx.size for idx in self.class_indices], dtype=np.int64)

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.n

    def check_majority(self) -> None:
        c = self.counts
        if c.size and c[0] < c.max():
            raise DomainError(f"class 0 must be the majority, counts={c.tolist()}")


@dataclass(frozen=True)
class ImbalanceProfile:
    """Class-count recipe.

    ``binary``: params ``(rho, n_minor)``; ``step``: ``(n_major, n_minor,
    n_major_classes, n_classes)``; ``geometric``: ``(n_max, base, n_classes)``.
    """

    kind: str
    params: tuple

    def counts(self) -> list[int]:
        if self.kind == "binary":
            rho, n_minor = self.params
            if rho < 1 or n_minor < 1:
                raise DomainError("binary profile needs rho >= 1 and n_minor >= 1")
            return [int(round_half_up(Fraction(str(rho)) * int(n_minor))), int(n_minor)]
        if self.kind == "step":
            n_major, n_minor, split, n_classes = (int(p) for p in self.params)
            if not (1 <= split < n_classes) or n_minor < 1 or n_major < n_minor:
                raise DomainError("step profile needs 1 <= split < L and n_major >= n_minor >= 1")
            return [n_major] * split + [n_minor] * (n_classes - split)
        if self.kind == "geometric":
            n_max, base, n_classes = self.params
            return geometric_counts(int(n_max), base, int(n_classes))
        raise DomainError(f"unknown profile kind {self.kind!r}")


def round_half_up(q: Fraction) -> int:
    return math.floor(q + Fraction(1, 2))


def geometric_counts(n_max: int, r, n_classes: int) -> list[int]:
    """Counts ``round_half_up(n_max * r**i)`` for i = 0..n_classes-1.

    ``r`` is converted through its decimal string, so 0.6 and 0.955 are exact.
    """
    if n_classes < 2:
        raise DomainError("geometric profile needs at least two classes")
    rq = r if isinstance(r, Fraction) else Fraction(str(r))
    if not (0 < rq < 1):
        raise DomainError("base must lie in (0, 1)")
    if n_max * rq ** (n_classes - 1) < Fraction(1, 2):
        raise DomainError("smallest class would round to zero examples")
    return [round_half_up(n_max * rq**i) for i in range(n_classes)]


def class_means(n_classes: int, d: int, separation: float, shift: float = 0.0) -> np.ndarray:
    """Class centers, class 0 (the majority) at ``shift * e_0``.

    Binary problems, and any problem with d < L, use an axis layout,
    mu_l = (shift + separation * l) e_0, so adjacent classes are
    ``separation`` apart. Otherwise mu_l = shift e_0 + (separation / sqrt 2)
    (e_l - e_0), a regular simplex where every pair is ``separation`` apart.
    """
    means = np.zeros((n_classes, d))
    if n_classes == 2 or d < n_classes:
        means[:, 0] = separation * np.arange(n_classes)
    else:
        s = separation / math.sqrt(2.0)
        for l in range(1, n_classes):
            means[l, l] = s
            means[l, 0] = -s
    means[:, 0] += shift
    return means


def _sample_classes(counts, means, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    for l, c in enumerate(counts):
        feats.append(means[l] + rng.standard_normal((c, means.shape[1])))
        labels.append(np.full(c, l, dtype=np.int64))
    return np.vstack(feats), np.concatenate(labels)


def make_gaussian_mixture(
    profile: ImbalanceProfile,
    d: int,
    separation: float,
    seed: int,
    test_per_class: int | None = None,
    shift: float = 0.0,
) -> tuple[Dataset, Dataset]:
    """Imbalanced train split and balanced test split from N(mu_l, I).

    The test split has the same size for every class: by default
    ``min(200, n_0)``. Train and test use distinct RNG streams.
    """
    if d < 1 or separation < 0:
        raise DomainError("need d >= 1 and separation >= 0")
    counts = profile.counts()
    if any(c < 1 for c in counts):
        raise DomainError("every class needs at least one example")
    means = class_means(len(counts), d, separation, shift)
    x, y = _sample_classes(counts, means, SeededRng(seed, "data"))
    train = Dataset(x, y, len(counts))
    train.check_majority()
    m = test_per_class if test_per_class is not None else min(TEST_PER_CLASS_CAP, max(counts))
    xt, yt = _sample_classes([m] * len(counts), means, SeededRng(seed, "test_data"))
    return train, Dataset(xt, yt, len(counts))


def save_dataset_csv(path, ds: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for row, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def load_dataset_csv(path, n_classes: int | None = None) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ValueError("last CSV column must be 'label'")
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Dataset(x, y, n_classes if n_classes is not None else int(y.max()) + 1)


@dataclass
class BatchPlan:
    """One epoch of steps; ``steps[t][l]`` are the class-``l`` indices of step t."""

    scheme: str
    steps: list[list[np.ndarray]]
    batch_sizes: list[int]
    n_batches: list[int]
    regroups: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


def _cut(perm: np.ndarray, size: int, n_batches: int) -> list[np.ndarray]:
    return [perm[j * size:(j + 1) * size] for j in range(n_batches)]


def plan_uniform_batches(ds: Dataset, batch_size: int, rng: SeededRng) -> BatchPlan:
    if not 1 <= batch_size <= ds.n:
        raise InfeasiblePlanError(f"batch size {batch_size} outside [1, {ds.n}]")
    nb = ds.n // batch_size
    steps = []
    for b in _cut(rng.permutation(ds.n), batch_size, nb):
        steps.append([b[ds.labels[b] == l] for l in range(ds.n_classes)])
    return BatchPlan("uniform", steps, [batch_size], [nb])


def plan_per_class_ratio_batches(ds: Dataset, n_batches: int, rng: SeededRng) -> BatchPlan:
    """Shuffle each class, cut it into ``n_batches`` equal batches, pair them by index."""
    counts = ds.counts
    if n_batches < 1 or np.any(counts < n_batches):
        raise InfeasiblePlanError(f"every class needs >= N_b={n_batches} examples, counts={counts.tolist()}")
    sizes = [int(c) // n_batches for c in counts]
    per_class = [_cut(idx[rng.permutation(idx.size)], sizes[l], n_batches) for l, idx in enumerate(ds.class_indices)]
    steps = [[per_class[l][j] for l in range(ds.n_classes)] for j in range(n_batches)]
    return BatchPlan("per-class-ratio", steps, sizes, [n_batches] * ds.n_classes, [0] * ds.n_classes)


def plan_oversampled_batches(ds: Dataset, per_class_size: int, rng: SeededRng) -> BatchPlan:
    """Equal per-class batches of ``per_class_size`` over N_b^(0) steps.

    A class whose batches are exhausted at step i (i % N_b^(l) == 0) is
    reshuffled and re-cut after that step is consumed; no regroup happens
    after the final step since the next epoch reshuffles everything anyway.
    """
    s = int(per_class_size)
    counts = ds.counts
    if s < 1 or np.any(counts < s):
        raise InfeasiblePlanError(f"per-class size {s} exceeds a class count, counts={counts.tolist()}")
    nbs = [int(c) // s for c in counts]
    n_steps = max(nbs)
    idxs = ds.class_indices
    groups = [_cut(idx[rng.permutation(idx.size)], s, nbs[l]) for l, idx in enumerate(idxs)]
    regroups = [0] * ds.n_classes
    steps = []
    for i in range(1, n_steps + 1):
        step = []
        for l in range(ds.n_classes):
            step.append(groups[l][(i - 1) % nbs[l]])
            if i % nbs[l] == 0 and i < n_steps:
                groups[l] = _cut(idxs[l][rng.permutation(idxs[l].size)], s, nbs[l])
                regroups[l] += 1
        steps.append(step)
    return BatchPlan("oversampled-equal", steps, [s] * ds.n_classes, nbs, regroups)


def profile_from_args(kind: str, values: Sequence) -> ImbalanceProfile:
    return ImbalanceProfile(kind, tuple(values))
