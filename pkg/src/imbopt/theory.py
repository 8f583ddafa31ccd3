"""Analytic quadratic test problems and mechanical checks of the convergence bounds.

Test problems are class-wise quadratics with diagonal Hessians,

    f^(l)(x) = 1/2 (x - c_l)^T H_l (x - c_l),      H_l = diag(h_l) > 0,

so f^(l)_* = 0, the smoothness constant is L2 = max_l max(h_l) and every
gradient is exact. Trajectories are simulated for a whole batch of
instances at once (leading axis N).

Every bound check yields a :class:`BoundReport`; ``hypotheses_ok`` says
whether the theorem's assumptions were verified numerically on that
trajectory. A report with ``hypotheses_ok and not satisfied`` is a genuine
counterexample.

Theorem ids used in reports:

==============  ===============================================================
gd_thm1         GD, step min((1 + cos a C_t) / (2 (1 + C_t^2) L2), c / sqrt T)
gd_alt          GD, constant step, bound D0 / (omega (T + 1))
pcngd_v1        PCNGD, step c / sqrt T
pcngd_v2        PCNGD, step c / ((1 + cos a) sqrt T)
rpcngd          PCNGD, randomized iterate R ~ omega_t
pl_decreasing   PCNGD under class-GD, step (2t + 1) / (C_mu (t + 1)^2)
pl_constant     PCNGD under class-GD, step c / C_mu
pcnsgd_ball     PCNSGD, step c / sqrt T, bound up to a ball of radius sigma_l
==============  ===============================================================
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics as dg
from .tensor_core import EPS_NORM, DomainError, SeededRng

COS_TOL = 1e-12
BATTERY_T = (100, 1000, 10_000)


class HypothesisError(ValueError):
    pass


# -- problem family ---------------------------------------------------------------

@dataclass
class TwoClassQuadratic:
    """Class-wise quadratics f^(l) = 1/2 w_l (x - c_l)^T A_l (x - c_l).

    ``hess`` holds the diagonals of A_l (one row per class) and ``weights``
    the class masses w_l. Despite the name any number of classes works.
    """

    centers: np.ndarray
    hess: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.hess = np.atleast_2d(np.asarray(self.hess, dtype=np.float64))
        if self.weights is None:
            self.weights = np.ones(self.centers.shape[0])
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.hess.shape != self.centers.shape or np.any(self.hess < 0) or np.any(self.weights <= 0):
            raise DomainError("need PSD diagonal Hessians shaped like the centers and positive weights")

    @property
    def eff_hess(self) -> np.ndarray:
        return self.weights[:, None] * self.hess

    @property
    def L2(self) -> float:
        return float(self.eff_hess.max())

    def losses(self, x) -> np.ndarray:
        d = np.asarray(x) - self.centers
        return 0.5 * np.einsum("lm,lm->l", self.eff_hess * d, d)

    def grads(self, x) -> np.ndarray:
        return self.eff_hess * (np.asarray(x) - self.centers)


def make_two_class_quadratic(angle: float, ratio: float, dim: int, curvature: float = 1.0) -> TwoClassQuadratic:
    """Instance with Hessians curvature * I whose class gradients at x_0 = 0 meet
    at ``angle`` with ||grad f^(1)|| / ||grad f^(0)|| = ``ratio``."""
    if not (0 < angle <= math.pi) or ratio <= 0 or curvature <= 0:
        raise DomainError("need angle in (0, pi], ratio > 0 and curvature > 0")
    collinear = math.isclose(angle, math.pi)
    if dim < 2 and not collinear:
        raise DomainError("a non-collinear angle needs dim >= 2")
    a = np.zeros(dim)
    b = np.zeros(dim)
    a[0] = 1.0
    if collinear:
        b[0] = -ratio
    else:
        b[0], b[1] = ratio * math.cos(angle), ratio * math.sin(angle)
    # gradient at 0 is -curvature * c_l, so the centers carry the geometry
    return TwoClassQuadratic(np.stack([a, b]), np.full((2, dim), curvature))


@dataclass
class QuadraticBatch:
    """N instances stacked: centers and hess are (N, L, m), x0 is (N, m)."""

    centers: np.ndarray
    hess: np.ndarray
    x0: np.ndarray

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    @property
    def L2(self) -> np.ndarray:
        return self.hess.max(axis=(1, 2))

    def grads(self, x: np.ndarray) -> np.ndarray:
        return self.hess * (x[:, None, :] - self.centers)

    def losses(self, x: np.ndarray) -> np.ndarray:
        d = x[:, None, :] - self.centers
        return 0.5 * np.einsum("nlm,nlm->nl", self.hess * d, d)

    def instance(self, i: int) -> TwoClassQuadratic:
        return TwoClassQuadratic(self.centers[i], self.hess[i])

    def subset(self, mask) -> "QuadraticBatch":
        return QuadraticBatch(self.centers[mask], self.hess[mask], self.x0[mask])


def random_quadratic_batch(
    rng: SeededRng,
    n: int,
    dim: int = 5,
    n_classes: int = 2,
    common_center: bool = True,
    radius: float = 1.0,
    rho_max: float = 20.0,
) -> QuadraticBatch:
    """Random instances with anisotropic diagonal Hessians and imbalanced masses.

    Hessian diagonals are uniform in [1, 2] scaled by the class mass n_l / n,
    where class 0 carries a random imbalance ratio in [1, rho_max] over each
    of the others. With ``common_center`` all classes share one minimizer;
    otherwise the centers are spread around it with unit scale. x_0 lies at
    distance ``radius`` from the (first) center.
    """
    rho = 1.0 + (rho_max - 1.0) * rng.uniform(n)
    mass = np.ones((n, n_classes))
    mass[:, 0] = rho
    mass /= mass.sum(axis=1, keepdims=True)
    hess = (1.0 + rng.uniform((n, n_classes, dim))) * mass[:, :, None]
    base = rng.standard_normal((n, 1, dim))
    centers = np.repeat(base, n_classes, axis=1)
    if not common_center:
        centers = centers + rng.standard_normal((n, n_classes, dim))
    u = rng.standard_normal((n, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return QuadraticBatch(centers, hess, centers[:, 0, :] + radius * u)


# -- trajectories -----------------------------------------------------------------

@dataclass
class Trace:
    """Per-step records of a batch run; time axis has T + 1 entries (x_0..x_T)."""

    gnorm: np.ndarray      # (N, T+1, L)
    loss: np.ndarray       # (N, T+1, L)
    cos: np.ndarray        # (N, T+1) pair cosine of classes 0 and 1
    eta: np.ndarray        # (N, T)
    dist: np.ndarray | None = None   # (N, T+1, L) distance to each center

    @property
    def T(self) -> int:
        return self.eta.shape[1]

    def ratio(self, l: int) -> np.ndarray:
        """C_t for class l: ||grad f^(1-l)|| / ||grad f^(l)|| (two classes)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.gnorm[:, :, 1 - l] / self.gnorm[:, :, l]


def _pair_cos(g: np.ndarray, norms: np.ndarray) -> np.ndarray:
    den = norms[:, 0] * norms[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.einsum("nm,nm->n", g[:, 0], g[:, 1]) / den
    return np.where(den > EPS_NORM**2, np.clip(c, -1.0, 1.0), np.nan)


def run_quadratic(batch: QuadraticBatch, rule: str, T: int, c: float = 1.0, l: int = 0,
                  eta: float | np.ndarray | None = None, c_mu: np.ndarray | None = None) -> Trace:
    """Simulate T steps of GD or PCNGD on every instance of the batch.

    rule: ``gd_thm1`` (per-class rule for class l), ``gd_const`` (step eta),
    ``pcngd`` (c / sqrt T), ``pcngd_adaptive`` (c / ((1 + cos) sqrt T)),
    ``pl_decreasing`` and ``pl_constant`` (need c_mu, one value per instance).
    """
    N, L, m = batch.centers.shape
    x = batch.x0.copy()
    gnorm = np.empty((N, T + 1, L))
    loss = np.empty((N, T + 1, L))
    cos = np.empty((N, T + 1))
    dist = np.empty((N, T + 1, L))
    etas = np.empty((N, T))
    L2 = batch.L2
    sq = math.sqrt(T)
    normalized = rule.startswith("pcngd") or rule.startswith("pl_")
    for t in range(T + 1):
        g = batch.grads(x)
        nr = np.linalg.norm(g, axis=2)
        gnorm[:, t] = nr
        loss[:, t] = batch.losses(x)
        dist[:, t] = np.linalg.norm(x[:, None, :] - batch.centers, axis=2)
        cs = _pair_cos(g, nr)
        cos[:, t] = cs
        if t == T:
            break
        if rule == "gd_thm1":
            with np.errstate(divide="ignore", invalid="ignore"):
                C = nr[:, 1 - l] / nr[:, l]
            e = np.minimum((1.0 + cs * C) / (2.0 * (1.0 + C**2) * L2), c / sq)
            e = np.where(np.isfinite(e), e, 0.0)
        elif rule == "gd_const":
            e = np.broadcast_to(np.asarray(eta, dtype=np.float64), (N,))
        elif rule == "pcngd":
            e = np.full(N, c / sq)
        elif rule == "pcngd_adaptive":
            e = c / ((1.0 + np.nan_to_num(cs)) * sq)
        elif rule == "pl_decreasing":
            e = (2 * t + 1) / (c_mu * (t + 1) ** 2)
        elif rule == "pl_constant":
            e = c / c_mu
        else:
            raise ValueError(f"unknown rule {rule!r}")
        e = np.where(np.isfinite(e), e, 0.0)
        etas[:, t] = e
        if normalized:
            safe = np.where(nr > EPS_NORM, nr, 1.0)
            step = (g / safe[:, :, None] * (nr > EPS_NORM)[:, :, None]).sum(axis=1)
        else:
            step = g.sum(axis=1)
        x = x - e[:, None] * step
    return Trace(gnorm, loss, cos, etas, dist)


# -- constants and reports ------------------------------------------------------------

@dataclass
class TheoremConstants:
    """Constants entering the bounds. L1 is recorded only; no bound uses it."""

    L2: float
    D0: float
    T: int
    c: float = 1.0
    L1: float = math.nan
    mu: float = math.nan
    omega_min: float = math.nan
    omega_max: float = math.nan
    C_max: float = math.nan
    sigma: float = math.nan

    def __post_init__(self):
        for name in ("L2", "D0", "c"):
            v = getattr(self, name)
            if v is None or not math.isfinite(v) or v < 0:
                raise ValueError(f"constant {name} must be a finite nonnegative number, got {v!r}")
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass
class BoundReport:
    theorem: str
    instance: int
    cls: int
    T: int
    lhs: float
    rhs: float
    satisfied: bool
    hypotheses_ok: bool
    extras: dict = field(default_factory=dict)

    @property
    def violation(self) -> bool:
        return self.hypotheses_ok and not self.satisfied


# -- bound formulas -----------------------------------------------------------------

def gd_thm1_rhs(k: TheoremConstants) -> float:
    return 2.0 * (1.0 + k.C_max) * k.L2 * k.D0 / (k.omega_min**2 * k.T) + k.D0 / (k.omega_min * k.c * math.sqrt(k.T))


def gd_alt_rhs(D0: float, omega: float, T: int) -> float:
    return D0 / (omega * (T + 1))


def pcngd_v1_rhs(k: TheoremConstants) -> float:
    return (k.D0 / k.c + 2.0 * k.L2 * k.c) / (k.omega_min * math.sqrt(k.T))


def pcngd_v2_rhs(k: TheoremConstants) -> float:
    return (k.D0 / k.c + 2.0 * k.L2 * k.c / k.omega_min) / math.sqrt(k.T)


def rpcngd_rhs(k: TheoremConstants, omega_bar: float) -> float:
    return (k.D0 / k.c + 2.0 * k.L2 * k.c) / (math.sqrt(k.T) * omega_bar)


def pl_decreasing_rhs(L2: float, c_mu: float, T: int) -> float:
    return 8.0 * L2 / (c_mu**2 * T)


def pl_constant_rhs(L2: float, c_mu: float, c: float, D0: float, T: int) -> float:
    return (1.0 - c) ** (T - 1) * D0 + 2.0 * L2 * c / c_mu**2


def pcnsgd_ball_rhs(k: TheoremConstants) -> float:
    w = k.omega_max
    return (k.D0 / k.c + 2.0 * k.L2 * k.c) / (w * math.sqrt(k.T)) + k.sigma * (1.0 + 2.0 / w)


def live_steps(gnorm: np.ndarray, T: int) -> np.ndarray:
    """Steps before any class gradient first falls to EPS_NORM, per instance.

    GD reaches exact stationarity in floating point on easy instances; from
    then on angles and ratios are undefined, the lhs is already below
    EPS_NORM^2 and the step-rule hypotheses are vacuous, so they are checked
    on this prefix only. ``gnorm`` is (..., T+1, L).
    """
    dead = np.any(gnorm[..., :T, :] <= EPS_NORM, axis=-1)
    return np.where(dead.any(axis=-1), np.argmax(dead, axis=-1), T)


def _opposed(cos: np.ndarray) -> bool:
    return bool(np.any(np.isnan(cos)) or np.any(cos <= -1.0 + COS_TOL))


# -- evaluators on single trajectories -------------------------------------------------

def thm_gd_bound_eval(k: TheoremConstants, gnorm_l: np.ndarray, margins: np.ndarray,
                      gnorm_all: np.ndarray | None = None) -> tuple[float, float, bool]:
    """min_t ||grad f^(l)||^2 over t < T against the GD theorem's rhs.

    Raises HypothesisError when some margin 1 + cos C_t is not positive. With
    ``gnorm_all`` ((T+1, L) norms of every class) margins are checked only
    before the first degenerate gradient (see :func:`live_steps`).
    """
    margins = np.asarray(margins)[: k.T]
    live = int(live_steps(np.asarray(gnorm_all), k.T)) if gnorm_all is not None else k.T
    margins = margins[:live]
    if live == 0 or np.any(~np.isfinite(margins)) or np.any(margins <= 0):
        raise HypothesisError("margin 1 + cos(alpha) C_t not positive along the trajectory")
    lhs = float(np.min(np.asarray(gnorm_l)[: k.T] ** 2))
    rhs = gd_thm1_rhs(k)
    return lhs, rhs, lhs <= rhs


def thm_pcngd_bound_eval(k: TheoremConstants, gnorm_l: np.ndarray, cos: np.ndarray, variant: str = "v1"):
    cos = np.asarray(cos)[: k.T]
    if _opposed(cos):
        raise HypothesisError("opposed or undefined class gradients on the trajectory")
    lhs = float(np.min(np.asarray(gnorm_l)[: k.T]))
    if variant == "v1":
        rhs = pcngd_v1_rhs(k)
    elif variant == "v2":
        rhs = pcngd_v2_rhs(k)
    else:
        raise ValueError("variant must be v1 or v2")
    return lhs, rhs, lhs <= rhs


def thm_rpcngd_check(k: TheoremConstants, gnorm_l: np.ndarray, cos: np.ndarray, n_draws: int,
                     rng: SeededRng) -> tuple[float, float, float, bool]:
    """Sample R ~ omega_t / sum omega_t and compare the mean ||grad f^(l)(x_R)||.

    Returns (empirical mean, stderr, rhs, satisfied) with
    satisfied = mean <= rhs + 3 stderr.
    """
    cos = np.asarray(cos)[: k.T]
    if _opposed(cos):
        raise HypothesisError("opposed or undefined class gradients on the trajectory")
    w = 1.0 + cos
    p = w / w.sum()
    draws = np.asarray(gnorm_l)[: k.T][rng.choice(p, n_draws)]
    mean = float(draws.mean())
    se = float(draws.std(ddof=1) / math.sqrt(n_draws)) if n_draws > 1 else 0.0
    rhs = rpcngd_rhs(k, float(w.mean()))
    return mean, se, rhs, mean <= rhs + 3.0 * se


def thm_pl_rate_check(L2: float, c_mu: float, gap_T: float, T: int, mode: str, c: float = 0.5, D0: float = 0.0):
    if mode == "decreasing":
        rhs = pl_decreasing_rhs(L2, c_mu, T)
    elif mode == "constant":
        rhs = pl_constant_rhs(L2, c_mu, c, D0, T)
    else:
        raise ValueError("mode must be decreasing or constant")
    return gap_T, rhs, gap_T <= rhs


def thm_pcnsgd_ball_check(k: TheoremConstants, mean_gnorm_l: np.ndarray):
    lhs = float(np.min(np.asarray(mean_gnorm_l)[: k.T]))
    rhs = pcnsgd_ball_rhs(k)
    return lhs, rhs, lhs <= rhs


def multiclass_condition_check(grads, l: int = 0) -> dict:
    """GD-style and PCNGD-style monotonicity margins for class l.

    GD: cos between g_l and sum_{i != l} g_i, C_t = ||sum_{i != l} g_i|| / ||g_l||.
    PCNGD: cos between g_l and sum_{i != l} g_i / ||g_i||, C~_t its norm.
    """
    cos_gd = dg.vs_rest_cosine(grads, l)
    C = dg.gradient_ratio(grads, l)
    cos_pcn = dg.vs_rest_cosine(grads, l, normalized=True)
    Ct = dg.normalized_gradient_ratio(grads, l)
    return {
        "cos_gd": cos_gd,
        "C_t": C,
        "margin_gd": dg.gd_monotonicity_margin(cos_gd, C),
        "cos_pcngd": cos_pcn,
        "C_tilde": Ct,
        "margin_pcngd": dg.gd_monotonicity_margin(cos_pcn, Ct),
    }


def worst_case_gradients(counts, dim: int | None = None, typical_norm: float = 1.0) -> np.ndarray:
    """Class gradients of norm n_i * M with all classes i != 0 collinear and
    class 0 orthogonal to them (the worst case for class 0)."""
    counts = np.asarray(counts, dtype=np.float64)
    dim = dim or 2
    g = np.zeros((counts.size, dim))
    g[0, 0] = counts[0] * typical_norm
    g[1:, 1] = counts[1:] * typical_norm
    return g


# -- tightness on the constant-Hessian quadratic ------------------------------------------

def tightness_bracket(L: float, eta: float, cos_alpha: float, C: float) -> float:
    """1 - L eta / 2 - L eta C^2 / 2 + (1 - L eta) cos(alpha) C."""
    return 1.0 - L * eta / 2.0 - L * eta * C**2 / 2.0 + (1.0 - L * eta) * cos_alpha * C


def tightness_threshold(L: float, cos_alpha: float, C: float) -> float:
    """Step size where the bracket changes sign (inf if it never does for eta > 0)."""
    den = L * ((1.0 + C**2) / 2.0 + cos_alpha * C)
    num = 1.0 + cos_alpha * C
    if den <= 0 or num <= 0:
        return math.inf if num > 0 else 0.0
    return num / den


def gd_one_step_change(q: TwoClassQuadratic, x, eta: float, l: int = 0) -> tuple[float, float]:
    """(measured, predicted) change of f^(l) after one GD step from x.

    Measured uses the iterates, written as 1/2 <x1 - x0, H (x1 + x0 - 2 c)> to
    avoid cancellation; predicted is -eta * bracket * ||grad f^(l)||^2.
    """
    x = np.asarray(x, dtype=np.float64)
    g = q.grads(x)
    x1 = x - eta * g.sum(axis=0)
    H = q.eff_hess[l]
    measured = 0.5 * float((x1 - x) @ (H * (x1 + x - 2.0 * q.centers[l])))
    L = float(H.max())
    n0 = np.linalg.norm(g[l])
    rest = g.sum(axis=0) - g[l]
    C = np.linalg.norm(rest) / n0
    cs = float(g[l] @ rest / (n0 * np.linalg.norm(rest))) if np.linalg.norm(rest) > 0 else 0.0
    predicted = -eta * tightness_bracket(L, eta, cs, C) * n0**2
    return measured, predicted


# -- batteries ------------------------------------------------------------------------

def _kappa_ball_mu(batch: QuadraticBatch, kappa: float) -> np.ndarray:
    """Class-GD constant valid on the ball ||x - c_l|| <= kappa * R0_l."""
    r0 = np.linalg.norm(batch.x0[:, None, :] - batch.centers, axis=2)
    return batch.hess.min(axis=2) / (batch.hess.max(axis=2) * kappa * r0)


def battery_gd(rng: SeededRng, n: int = 120, Ts=BATTERY_T, c: float = 1.0) -> list[BoundReport]:
    out = []
    batch = random_quadratic_batch(rng, n)
    D0 = batch.losses(batch.x0)
    L2 = batch.L2
    for T in Ts:
        for l in (0, 1):
            tr = run_quadratic(batch, "gd_thm1", T, c=c, l=l)
            C = tr.ratio(l)[:, :T]
            marg = 1.0 + tr.cos[:, :T] * C
            live = live_steps(tr.gnorm, T)
            for i in range(n):
                mi, Ci = marg[i, : live[i]], C[i, : live[i]]
                ok = bool(live[i] > 0 and np.all(np.isfinite(mi)) and np.all(mi > 0))
                k = TheoremConstants(L2[i], D0[i, l], T, c, L1=float(tr.gnorm[i, :, l].max()),
                                     omega_min=float(mi.min()) if ok else math.nan,
                                     C_max=float((Ci**2).max()) if ok else math.nan)
                lhs = float(np.min(tr.gnorm[i, :T, l] ** 2))
                rhs = gd_thm1_rhs(k) if ok else math.nan
                out.append(BoundReport("gd_thm1", i, l, T, lhs, rhs, bool(ok and lhs <= rhs), ok,
                                       {"omega_min": k.omega_min, "C_max": k.C_max}))
        # constant step chosen so omega_t stays positive for every C_t this Hessian pair allows
        hmax = batch.hess.max(axis=2)
        hmin = batch.hess.min(axis=2)
        cb = np.maximum(hmax[:, 1] / hmin[:, 0], hmax[:, 0] / hmin[:, 1])
        eta = 1.0 / (2.0 * L2 * (1.0 + cb**2))
        tr = run_quadratic(batch, "gd_const", T, eta=eta)
        for l in (0, 1):
            C = tr.ratio(l)
            om_t = eta[:, None] * (1.0 + tr.cos * C - L2[:, None] * eta[:, None] * (1.0 + C**2))
            live = live_steps(tr.gnorm, T + 1)
            for i in range(n):
                oi = om_t[i, : live[i]]
                ok = bool(live[i] > 0 and np.all(np.isfinite(oi)) and oi.min() > 0)
                om = float(oi.min()) if live[i] > 0 else math.nan
                lhs = float(np.min(tr.gnorm[i, :, l] ** 2))
                rhs = gd_alt_rhs(D0[i, l], om, T) if ok else math.nan
                out.append(BoundReport("gd_alt", i, l, T, lhs, rhs, bool(ok and lhs <= rhs), ok, {"omega": om}))
    return out


def _pcngd_batch(rng: SeededRng, n: int) -> QuadraticBatch:
    """Three quarters common-minimizer instances, the rest with spread centers.

    Spread centers usually drive PCNGD onto a point where the normalized
    class gradients cancel exactly (cos = -1); those are reported with
    hypotheses_ok = False.
    """
    k = n - n // 4
    a = random_quadratic_batch(rng, k, common_center=True)
    b = random_quadratic_batch(rng, n - k, common_center=False)
    return QuadraticBatch(np.concatenate([a.centers, b.centers]), np.concatenate([a.hess, b.hess]),
                          np.concatenate([a.x0, b.x0]))


def battery_pcngd(rng: SeededRng, variant: str, n: int = 140, Ts=BATTERY_T, c: float = 1.0) -> list[BoundReport]:
    out = []
    batch = _pcngd_batch(rng, n)
    D0 = batch.losses(batch.x0)
    L2 = batch.L2
    rule = "pcngd" if variant == "v1" else "pcngd_adaptive"
    tid = f"pcngd_{variant}"
    for T in Ts:
        tr = run_quadratic(batch, rule, T, c=c)
        cos = tr.cos[:, :T]
        for i in range(n):
            ok = not _opposed(cos[i])
            w = 1.0 + cos[i]
            om = float(np.nanmin(w)) if variant == "v1" else float(np.nanmin(w) ** 2)
            for l in (0, 1):
                k = TheoremConstants(L2[i], D0[i, l], T, c, omega_min=om)
                lhs = float(np.min(tr.gnorm[i, :T, l]))
                rhs = (pcngd_v1_rhs(k) if variant == "v1" else pcngd_v2_rhs(k)) if ok else math.nan
                out.append(BoundReport(tid, i, l, T, lhs, rhs, bool(ok and lhs <= rhs), ok, {"omega_min": om}))
    return out


def battery_rpcngd(rng: SeededRng, n: int = 140, Ts=BATTERY_T, c: float = 1.0, n_draws: int = 2000) -> list[BoundReport]:
    out = []
    batch = _pcngd_batch(rng, n)
    D0 = batch.losses(batch.x0)
    L2 = batch.L2
    for T in Ts:
        tr = run_quadratic(batch, "pcngd", T, c=c)
        for i in range(n):
            ok = not _opposed(tr.cos[i, :T])
            for l in (0, 1):
                k = TheoremConstants(L2[i], D0[i, l], T, c)
                if not ok:
                    out.append(BoundReport("rpcngd", i, l, T, math.nan, math.nan, False, False, {"stderr": math.nan}))
                    continue
                mean, se, rhs, sat = thm_rpcngd_check(k, tr.gnorm[i, :, l], tr.cos[i], n_draws, rng)
                w = 1.0 + tr.cos[i, :T]
                exact = float((w * tr.gnorm[i, :T, l]).sum() / w.sum())
                out.append(BoundReport("rpcngd", i, l, T, mean, rhs, bool(sat), True,
                                       {"stderr": se, "exact_expectation": exact}))
    return out


def _pl_max_omega(batch: QuadraticBatch, T: int, mode: str, c: float, c_mu: np.ndarray) -> np.ndarray:
    """max_{t < T} (1 + cos a_t) of the PCNGD run with the class-GD schedule."""
    x = batch.x0.copy()
    best = np.full(batch.n, -np.inf)
    for t in range(T):
        g = batch.grads(x)
        nr = np.linalg.norm(g, axis=2)
        best = np.maximum(best, 1.0 + _pair_cos(g, nr))
        e = (2 * t + 1) / (c_mu * (t + 1) ** 2) if mode == "decreasing" else c / c_mu
        safe = np.where(nr > EPS_NORM, nr, 1.0)
        x = x - e[:, None] * (g / safe[:, :, None] * (nr > EPS_NORM)[:, :, None]).sum(axis=1)
    return best


def calibrate_c_mu(batch: QuadraticBatch, mu: np.ndarray, T: int, mode: str, c: float = 0.5,
                   max_iter: int = 25, rtol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Fixed point C = max_t 2 mu (1 + cos a_t) along the trajectory run with step built from C.

    Iterates C <- 2 mu max_t (1 + cos a_t), rerunning only unconverged
    instances. Returns (C_mu, converged mask); some instances cycle and stay
    unconverged, which callers treat as an unverified hypothesis.
    """
    C = 4.0 * mu
    done = np.zeros(batch.n, dtype=bool)
    for _ in range(max_iter):
        todo = np.flatnonzero(~done)
        if todo.size == 0:
            break
        newC = 2.0 * mu[todo] * _pl_max_omega(batch.subset(todo), T, mode, c, C[todo])
        done[todo] = np.abs(newC - C[todo]) <= rtol * C[todo]
        C[todo] = newC
    return C, done


def battery_pl(rng: SeededRng, mode: str, n: int = 130, Ts=BATTERY_T, c: float = 0.5,
               kappa: float = 1.5) -> list[BoundReport]:
    """PCNGD under the class-GD inequality, checked per class on the class's own C_mu.

    The class-GD constant mu_l is the one valid on the ball of radius
    kappa * ||x_0 - c_l||; the hypothesis check confirms the trajectory stays
    in that ball, the inequality holds at every iterate and the C_mu fixed
    point converged.
    """
    out = []
    batch = random_quadratic_batch(rng, n, common_center=True)
    D0 = batch.losses(batch.x0)
    L2 = batch.L2
    mus = _kappa_ball_mu(batch, kappa)
    r0 = np.linalg.norm(batch.x0[:, None, :] - batch.centers, axis=2)
    tid = f"pl_{mode}"
    # both classes calibrate in one stacked batch; the trajectory only depends on C
    both = QuadraticBatch(np.concatenate([batch.centers] * 2), np.concatenate([batch.hess] * 2),
                          np.concatenate([batch.x0] * 2))
    for T in Ts:
        mu2 = np.concatenate([mus[:, 0], mus[:, 1]])
        C2, conv2 = calibrate_c_mu(both, mu2, T, mode, c)
        for l in (0, 1):
            sl = slice(l * n, (l + 1) * n)
            mu, C, conv = mu2[sl], C2[sl], conv2[sl]
            rule = "pl_decreasing" if mode == "decreasing" else "pl_constant"
            tr = run_quadratic(batch, rule, T, c=c, c_mu=C)
            inside = np.all(tr.dist[:, :, l] <= kappa * r0[:, l][:, None] * (1 + 1e-12), axis=1)
            with np.errstate(invalid="ignore"):
                cgd = np.all(0.5 * tr.gnorm[:, :, l] >= mu[:, None] * tr.loss[:, :, l] * (1 - 1e-12), axis=1)
            for i in range(n):
                ok = bool(conv[i] and inside[i] and cgd[i] and not _opposed(tr.cos[i, :T]))
                gap = float(tr.loss[i, T, l])
                _, rhs, sat = thm_pl_rate_check(L2[i], C[i], gap, T, mode, c, D0[i, l])
                out.append(BoundReport(tid, i, l, T, gap, rhs, bool(ok and sat), ok,
                                       {"mu": float(mu[i]), "C_mu": float(C[i])}))
    return out


# -- stochastic finite-sum quadratics (PCNSGD) ---------------------------------------------

@dataclass
class FiniteSumQuadratic:
    """f^(l)(x) = (1/n) sum_{i in C_l} 1/2 (x - c_i)^T H_l (x - c_i), batched over N.

    ``example_centers[l]`` is (N, n_l, m), ``hess`` is (N, L, m). The class
    gradient is (n_l / n) H_l (x - cbar_l) and the minimum value
    f^(l)_* = (1/n) sum 1/2 (c_i - cbar_l)^T H_l (c_i - cbar_l).
    """

    example_centers: list
    hess: np.ndarray
    x0: np.ndarray

    @property
    def counts(self) -> list[int]:
        return [c.shape[1] for c in self.example_centers]

    @property
    def n_total(self) -> int:
        return sum(self.counts)

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    def scale(self, l: int) -> float:
        return self.counts[l] / self.n_total

    def cbar(self, l: int) -> np.ndarray:
        return self.example_centers[l].mean(axis=1)

    @property
    def L2(self) -> np.ndarray:
        s = np.array([self.scale(l) for l in range(len(self.counts))])
        return (self.hess * s[None, :, None]).max(axis=(1, 2))

    def f_star(self, l: int) -> np.ndarray:
        d = self.example_centers[l] - self.cbar(l)[:, None, :]
        return 0.5 * np.einsum("nim,nm,nim->n", d, self.hess[:, l], d) / self.n_total

    def class_loss(self, l: int, x: np.ndarray) -> np.ndarray:
        d = x[:, None, :] - self.example_centers[l]
        return 0.5 * np.einsum("nim,nm,nim->n", d, self.hess[:, l], d) / self.n_total

    def class_grad(self, l: int, x: np.ndarray) -> np.ndarray:
        return self.scale(l) * self.hess[:, l] * (x - self.cbar(l))


def random_finite_sum_batch(rng: SeededRng, n: int, counts=(20, 4), dim: int = 5, spread: float = 0.3,
                            radius: float = 1.0) -> FiniteSumQuadratic:
    """Instances whose class minimizers coincide; per-example centers scatter by ``spread``."""
    base = rng.standard_normal((n, dim))
    hess = 1.0 + rng.uniform((n, len(counts), dim))
    ex = []
    for nl in counts:
        d = spread * rng.standard_normal((n, nl, dim))
        d -= d.mean(axis=1, keepdims=True)
        ex.append(base[:, None, :] + d)
    u = rng.standard_normal((n, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return FiniteSumQuadratic(ex, hess, base + radius * u)


def _epoch_batch_means(centers: np.ndarray, n_batches: int, rng: SeededRng) -> np.ndarray:
    """Shuffle every trajectory's class pool and return (S, n_batches, m) batch means."""
    S, nl, m = centers.shape
    size = nl // n_batches
    perm = np.argsort(rng.uniform((S, nl)), axis=1)[:, : size * n_batches]
    picked = np.take_along_axis(centers, perm[:, :, None], axis=1)
    return picked.reshape(S, n_batches, size, m).mean(axis=2)


def run_pcnsgd_quadratic(fs: FiniteSumQuadratic, T: int, c: float, n_batches: int, n_seeds: int,
                         rng: SeededRng) -> dict:
    """PCNSGD (per-class-ratio batches, step c / sqrt T) for n_seeds runs per instance.

    Returns mean-over-seeds gradient norms (N, T+1, L), max of 1 + cos over
    seeds and steps (N,), and an opposed-gradient flag per instance.
    """
    N, m = fs.x0.shape
    L = len(fs.counts)
    S = N * n_seeds
    x = np.repeat(fs.x0, n_seeds, axis=0)
    hess = np.repeat(fs.hess, n_seeds, axis=0)
    pools = [np.repeat(c_, n_seeds, axis=0) for c_ in fs.example_centers]
    cbars = [np.repeat(fs.cbar(l), n_seeds, axis=0) for l in range(L)]
    scale = [fs.scale(l) for l in range(L)]
    eta = c / math.sqrt(T)
    mean_norm = np.zeros((N, T + 1, L))
    max_w = np.full(S, -np.inf)
    opposed = np.zeros(S, dtype=bool)
    means = None
    for t in range(T + 1):
        G = np.stack([scale[l] * hess[:, l] * (x - cbars[l]) for l in range(L)], axis=1)
        nr = np.linalg.norm(G, axis=2)
        mean_norm[:, t] = nr.reshape(N, n_seeds, L).mean(axis=1)
        if t == T:
            break
        cs = _pair_cos(G, nr)
        opposed |= np.isnan(cs) | (cs <= -1.0 + COS_TOL)
        max_w = np.maximum(max_w, 1.0 + np.nan_to_num(cs, nan=-1.0))
        j = t % n_batches
        if j == 0:
            means = [_epoch_batch_means(pools[l], n_batches, rng) for l in range(L)]
        step = np.zeros_like(x)
        for l in range(L):
            g = scale[l] * hess[:, l] * (x - means[l][:, j])
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            step += np.where(gn > EPS_NORM, g / np.where(gn > EPS_NORM, gn, 1.0), 0.0)
        x = x - eta * step
    return {
        "mean_gnorm": mean_norm,
        "max_w": max_w.reshape(N, n_seeds).max(axis=1),
        "opposed": opposed.reshape(N, n_seeds).any(axis=1),
    }


def estimate_sigma(fs: FiniteSumQuadratic, l: int, n_batches: int, rng: SeededRng, points: np.ndarray,
                   n_samples: int = 1000) -> np.ndarray:
    """Max over sampled batches of ||grad f^(l)(x) - g^(l)(x)|| at each of the given points.

    ``points`` is (N, P, m); returns one sigma per instance (max over points).
    """
    N, P, m = points.shape
    nl = fs.counts[l]
    size = nl // n_batches
    pool = fs.example_centers[l]
    cbar = fs.cbar(l)
    h = fs.hess[:, l]
    s = fs.scale(l)
    best = np.zeros(N)
    for p in range(P):
        x = points[:, p]
        full = s * h * (x - cbar)
        for _ in range(n_samples // 100):
            idx = np.argsort(rng.uniform((N, 100, nl)), axis=2)[:, :, :size]
            bm = np.take_along_axis(pool[:, None, :, :], idx[:, :, :, None], axis=2).mean(axis=2)
            g = s * h[:, None, :] * (x[:, None, :] - bm)
            best = np.maximum(best, np.linalg.norm(g - full[:, None, :], axis=2).max(axis=1))
    return best


def battery_pcnsgd_ball(rng: SeededRng, n: int = 110, Ts=BATTERY_T, c: float = 0.5, n_seeds: int = 20,
                        counts=(20, 4), n_batches: int = 4) -> list[BoundReport]:
    out = []
    fs = random_finite_sum_batch(rng, n, counts)
    L = len(counts)
    D0 = np.stack([fs.class_loss(l, fs.x0) - fs.f_star(l) for l in range(L)], axis=1)
    L2 = fs.L2
    for T in Ts:
        res = run_pcnsgd_quadratic(fs, T, c, n_batches, n_seeds, rng)
        # sigma at 10 points of a deterministic PCNGD path between x_0 and the minimizer
        lam = np.linspace(0.0, 1.0, 10)
        pts = fs.x0[:, None, :] + lam[None, :, None] * (fs.cbar(0) - fs.x0)[:, None, :]
        w_max = res["max_w"] * (1.0 + 1e-9) + 1e-12
        for l in range(L):
            sigma = estimate_sigma(fs, l, n_batches, rng, pts)
            for i in range(n):
                ok = bool(not res["opposed"][i] and w_max[i] > 0)
                k = TheoremConstants(L2[i], D0[i, l], T, c, omega_max=float(w_max[i]), sigma=float(sigma[i]))
                lhs, rhs, sat = thm_pcnsgd_ball_check(k, res["mean_gnorm"][i, :, l])
                out.append(BoundReport("pcnsgd_ball", i, l, T, lhs, rhs, bool(ok and sat), ok,
                                       {"sigma": k.sigma, "omega_max": k.omega_max}))
    return out


# -- PCNGD per-class monotonicity ------------------------------------------------------

def pcngd_decrease_threshold(gnorm_l, cos_alpha, L2: float):
    """Largest step for which the per-class bound guarantees a decrease of f^(l)."""
    return (1.0 + np.asarray(cos_alpha)) * np.asarray(gnorm_l) / (2.0 * L2)


def pcngd_monotonicity_check(batch: QuadraticBatch, T: int = 200, frac: float = 0.5,
                             tol: float = 1e-12) -> list[BoundReport]:
    """PCNGD with eta_t = frac * min_l threshold_t; every class loss must not increase.

    lhs is the largest one-step increase of f^(l) relative to max(1, f^(l)(x_t)).
    """
    N = batch.n
    x = batch.x0.copy()
    L2 = batch.L2
    worst = np.full((N, batch.centers.shape[1]), -np.inf)
    opposed = np.zeros(N, dtype=bool)
    f = batch.losses(x)
    for _ in range(T):
        g = batch.grads(x)
        nr = np.linalg.norm(g, axis=2)
        cs = _pair_cos(g, nr)
        bad = np.isnan(cs) | (cs <= -1.0 + COS_TOL)
        opposed |= bad
        thr = pcngd_decrease_threshold(nr, np.nan_to_num(cs)[:, None], L2[:, None]).min(axis=1)
        e = np.where(bad, 0.0, frac * thr)
        safe = np.where(nr > EPS_NORM, nr, 1.0)
        x = x - e[:, None] * (g / safe[:, :, None] * (nr > EPS_NORM)[:, :, None]).sum(axis=1)
        f1 = batch.losses(x)
        worst = np.maximum(worst, (f1 - f) / np.maximum(1.0, f))
        f = f1
    out = []
    for i in range(N):
        for l in range(worst.shape[1]):
            w = float(worst[i, l])
            out.append(BoundReport("pcngd_monotone", i, l, T, w, tol, w <= tol, not opposed[i], {"frac": frac}))
    return out


# -- remaining batteries ---------------------------------------------------------------

TIGHT_TOL = 1e-10


def battery_tightness(rng: SeededRng, n: int = 50, dim: int = 3, offset: float = 1e-6) -> list[BoundReport]:
    """Exact one-step expansion on constant-Hessian quadratics, and the sign flip at eta*.

    Per instance: relative error of the expansion at a random step, and the
    sign of the measured change just below and above the threshold step
    (instances whose margin 1 + cos C is not positive increase for every
    step; then the check is that the change is positive at the random step).
    """
    out = []
    for i in range(n):
        angle = math.pi * (0.02 + 0.96 * float(rng.uniform()))
        ratio = float(np.exp(rng.uniform() * 2 * math.log(8.0) - math.log(8.0)))
        L = 0.5 + 1.5 * float(rng.uniform())
        q = make_two_class_quadratic(angle, ratio, dim, curvature=L)
        x0 = np.zeros(dim)
        cs = math.cos(angle)
        eta_star = tightness_threshold(L, cs, ratio)
        eta = float(rng.uniform()) * 2.0 / L
        meas, pred = gd_one_step_change(q, x0, eta)
        rel = abs(meas - pred) / abs(pred) if pred != 0 else abs(meas)
        flip_ok = True
        below = above = math.nan
        if 0 < eta_star < math.inf:
            below, _ = gd_one_step_change(q, x0, eta_star * (1 - offset))
            above, _ = gd_one_step_change(q, x0, eta_star * (1 + offset))
            flip_ok = below < 0 < above
        elif eta_star == 0.0:
            flip_ok = meas > 0
        out.append(BoundReport("tightness", i, 0, 1, meas, pred, bool(rel <= TIGHT_TOL and flip_ok), True,
                               {"rel_err": rel, "eta": eta, "eta_star": eta_star,
                                "change_below": below, "change_above": above}))
    return out


def battery_multiclass(rng: SeededRng, n: int = 100, Ls=(3, 5, 10), dim: int = 12) -> list[BoundReport]:
    """Worst-case ratios and the C~_t <= L - 1 bound on random gradient sets.

    Rows: ``balanced`` (C_t = L - 1), ``imbalanced`` (C_t = sum_{i!=0} n_i / n_0),
    ``normalized`` (C~_t = L - 1) for the collinear construction, and ``random``
    (C~_t <= L - 1, and C~_t unchanged by per-class rescaling).
    """
    out = []
    k = 0
    for L in Ls:
        bal = np.full(L, 7.0)
        counts = np.sort(1.0 + np.floor(100 * rng.uniform(L)))
        counts = np.concatenate([[counts.max() + 1.0], counts[:-1]])   # class 0 weakly majority
        for kind, cnt in (("balanced", bal), ("imbalanced", counts)):
            g = worst_case_gradients(cnt)
            target = float(cnt[1:].sum() / cnt[0])
            got = dg.gradient_ratio(g, 0)
            out.append(BoundReport("multiclass", k, 0, 0, got, target, abs(got - target) <= 1e-12 * max(1, target),
                                   True, {"kind": kind, "L": L}))
            k += 1
        got = dg.normalized_gradient_ratio(worst_case_gradients(counts), 0)
        out.append(BoundReport("multiclass", k, 0, 0, got, L - 1.0, abs(got - (L - 1)) <= 1e-12 * (L - 1), True,
                               {"kind": "normalized", "L": L}))
        k += 1
        for _ in range(n):
            g = rng.standard_normal((L, dim))
            ct = dg.normalized_gradient_ratio(g, 0)
            gam = np.exp(rng.standard_normal(L))[:, None]
            ct2 = dg.normalized_gradient_ratio(g * gam, 0)
            ok = ct <= L - 1 + 1e-12 and abs(ct - ct2) <= 1e-12 * max(1.0, ct)
            out.append(BoundReport("multiclass", k, 0, 0, ct, L - 1.0, bool(ok), True, {"kind": "random", "L": L}))
            k += 1
    return out


CLT_SWEEP = (2, 8, 32)
CLT_MIN_BATCH = 32


def battery_clt(rng: SeededRng, dim: int = 20, sweep=CLT_SWEEP, n_draws: int = 10_000,
                snr: float = 4.0) -> list[BoundReport]:
    """Gaussian noise model: projection of the normalized batch gradient on the FBG.

    Isotropic unit per-example noise and ||G||^2 = snr * dim. The neglected
    terms of the expansion are O(attenuation^2), so snr is set high enough
    that they stay below the Monte-Carlo error at n_tilde = 32.

    The second-order prediction is asserted (hypotheses_ok) only for
    n_tilde >= CLT_MIN_BATCH; smaller batches are reported for the scaling
    check. A final ``clt_scaling`` row holds max/min of n_tilde * (1 - measured).
    """
    G = np.zeros(dim)
    G[0] = math.sqrt(snr * dim)
    cov = np.ones(dim)
    out = []
    scaled = []
    for i, nt in enumerate(sweep):
        r = dg.clt_projection_check(G, nt, n_draws, rng=rng, noise_cov=cov)
        ok = abs(r.measured - r.predicted) <= 3.0 * r.stderr
        scaled.append(nt * r.attenuation)
        out.append(BoundReport("clt", i, 0, 0, r.measured, r.predicted, bool(ok), nt >= CLT_MIN_BATCH,
                               {"n_tilde": nt, "stderr": r.stderr, "predicted_stderr": r.predicted_stderr,
                                "attenuation": r.attenuation}))
    spread = max(scaled) / min(scaled)
    out.append(BoundReport("clt_scaling", len(sweep), 0, 0, spread, 2.0, spread <= 2.0, True,
                           {"n_tilde": 0, "stderr": math.nan, "predicted_stderr": math.nan, "attenuation": math.nan}))
    return out


BATTERIES = {
    "gd": battery_gd,
    "pcngd_v1": lambda rng: battery_pcngd(rng, "v1"),
    "pcngd_v2": lambda rng: battery_pcngd(rng, "v2"),
    "rpcngd": battery_rpcngd,
    "pl_decreasing": lambda rng: battery_pl(rng, "decreasing"),
    "pl_constant": lambda rng: battery_pl(rng, "constant"),
    "pcnsgd_ball": battery_pcnsgd_ball,
    "pcngd_monotone": lambda rng: pcngd_monotonicity_check(_pcngd_batch(rng, 140)),
    "multiclass": battery_multiclass,
    "tightness": battery_tightness,
    "clt": battery_clt,
}


def run_battery(name: str, seed: int = 0) -> list[BoundReport]:
    if name not in BATTERIES:
        raise KeyError(f"unknown battery {name!r}; valid: {', '.join(BATTERIES)}")
    return BATTERIES[name](SeededRng(seed, "theory"))


REPORT_COLUMNS = ["theorem", "instance", "class", "T", "lhs", "rhs", "satisfied", "hypotheses_ok"]


def write_reports_csv(path, reports: list[BoundReport]) -> None:
    extra = sorted({k for r in reports for k in r.extras})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS + extra)
        for r in reports:
            row = [r.theorem, r.instance, r.cls, r.T, dg.fmt(r.lhs), dg.fmt(r.rhs), int(r.satisfied), int(r.hypotheses_ok)]
            for k in extra:
                v = r.extras.get(k, "")
                row.append(v if isinstance(v, str) else dg.fmt(v))
            w.writerow(row)


def violations(reports: list[BoundReport]) -> list[BoundReport]:
    return [r for r in reports if r.violation]
