"""Dense float64 arrays, vector primitives and named deterministic RNG streams.

Arrays are plain C-contiguous ``numpy.float64`` ndarrays (row-major). The
random generator is numpy's PCG64 seeded through ``SeedSequence`` with the
stream id as spawn key, so ``(seed, stream)`` pins the sample sequence on
every platform. Gaussian draws use Box-Muller on that uniform stream.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

EPS_NORM = 1e-12

# Named streams; values are the SeedSequence spawn keys.
STREAMS = {"init": 0, "data": 1, "batching": 2, "noise": 3, "test_data": 4, "theory": 5}


class DimensionError(ValueError):
    pass


class UndefinedAngleError(ArithmeticError):
    pass


class DomainError(ValueError):
    pass


def as_tensor(data, shape: Sequence[int] | None = None, allow_nonfinite: bool = False) -> np.ndarray:
    """Copy ``data`` into a fresh float64 row-major array, optionally reshaped.

    Non-finite entries are rejected unless ``allow_nonfinite`` is set.
    """
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise DimensionError(f"negative extent in shape {shape}")
        if arr.size != math.prod(shape):
            raise DimensionError(f"{arr.size} entries cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN or Inf")
    return arr


def dot(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.size} vs {v.size}")
    return float(np.dot(u, v))


def l2_norm(u) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(u, u)))


def cosine_angle(u, v, eps: float = EPS_NORM) -> float:
    """Cosine of the angle between ``u`` and ``v``, clamped to [-1, 1].

    Raises UndefinedAngleError when either norm is at most ``eps``.
    """
    nu, nv = l2_norm(u), l2_norm(v)
    if nu <= eps or nv <= eps:
        raise UndefinedAngleError(f"degenerate norm ({nu:.3g}, {nv:.3g})")
    c = dot(u, v) / (nu * nv)
    return min(1.0, max(-1.0, c))


class SeededRng:
    """Deterministic generator for one (seed, stream) pair."""

    def __init__(self, seed: int, stream: int | str = 0):
        if isinstance(stream, str):
            if stream not in STREAMS:
                raise KeyError(f"unknown stream {stream!r}; known: {sorted(STREAMS)}")
            stream = STREAMS[stream]
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.seed_sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(self.seed_sequence))

    @property
    def derived_seed(self) -> int:
        """First 64-bit word of the derived state; recorded in run manifests."""
        return int(self.seed_sequence.generate_state(1, np.uint64)[0])

    def uniform(self, size=None) -> np.ndarray | float:
        return self._gen.random(size)

    def standard_normal(self, size) -> np.ndarray:
        size = (size,) if np.isscalar(size) else tuple(size)
        n = math.prod(size)
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n].reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, p: np.ndarray, size: int) -> np.ndarray:
        return self._gen.choice(len(p), size=size, p=p)


def gaussian_sample(rng: SeededRng, mean, cov_diag, size: int | None = None) -> np.ndarray:
    """Sample from N(mean, diag(cov_diag)); ``size`` adds a leading sample axis."""
    mean = np.asarray(mean, dtype=np.float64)
    cov_diag = np.asarray(cov_diag, dtype=np.float64)
    if mean.shape != cov_diag.shape:
        raise DimensionError("mean and cov_diag shapes differ")
    if np.any(cov_diag <= 0):
        raise DomainError("cov_diag entries must be positive")
    shape = mean.shape if size is None else (size,) + mean.shape
    return mean + np.sqrt(cov_diag) * rng.standard_normal(shape)
