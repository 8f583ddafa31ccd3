"""Update rules of the GD / per-class-normalized family and the training loop.

Every step function takes the current :class:`OptimizerState` and one row per
class (the class's gradient contribution for this step) and returns the new
state plus a :class:`StepReport`. Rows for classes absent from a batch may be
``None``; they contribute nothing.

====================  =============================================
algorithm             per-class contribution
====================  =============================================
gd, sgd, sgd_o        g_l (unnormalized)
pcngd, pcnsgd,        g_l / ||g_l||
pcnsgd_o
pcnsgd_r              g_l / (p_l ||g_l||), p_l = <g_l/||g_l||, G_l/||G_l||>
                      with G_l the cached full-batch gradient, p_l clamped
                      to [p_min, 1]
====================  =============================================

The applied step is always ``-eta_t * sum_l contribution_l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diagnostics as dg
from .data import (
    Dataset,
    plan_oversampled_batches,
    plan_per_class_ratio_batches,
    plan_uniform_batches,
)
from .model import (
    ModelSpec,
    full_gradient,
    init_params,
    per_class_gradient,
    per_class_gradients,
    per_class_loss,
    predict,
)
from .tensor_core import EPS_NORM, DomainError, SeededRng

ALGORITHMS = ("gd", "pcngd", "sgd", "pcnsgd", "sgd_o", "pcnsgd_o", "pcnsgd_r")
FULL_BATCH = ("gd", "pcngd")
SCHEDULES = ("constant", "sqrt_T", "angle_adaptive", "pl_decreasing")
P_MIN = dg.P_MIN
REFRESH_INTERVAL = 5


class StaleCacheError(RuntimeError):
    """The PCNSGD+R full-batch gradient cache must be refreshed first."""


class DivergenceError(RuntimeError):
    def __init__(self, step: int, log=None, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step
        self.log = log


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Step-size rule eta_t.

    constant: eta. sqrt_T: c / sqrt(T). angle_adaptive: c / ((1 + cos a) sqrt(T)).
    pl_decreasing: (2t + 1) / (c_mu (t + 1)^2).
    """

    kind: str = "constant"
    eta: float = 0.1
    c: float = 1.0
    horizon: int = 1
    c_mu: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"schedule kind must be one of {SCHEDULES}, got {self.kind!r}")
        if self.eta <= 0 or self.c <= 0 or self.horizon < 1 or self.c_mu <= 0:
            raise ConfigError("schedule parameters must be positive")

    def __call__(self, t: int, cos_alpha: float | None = None) -> float:
        if self.kind == "constant":
            return self.eta
        if self.kind == "sqrt_T":
            return self.c / math.sqrt(self.horizon)
        if self.kind == "angle_adaptive":
            ca = 0.0 if cos_alpha is None or math.isnan(cos_alpha) else cos_alpha
            if ca <= -1.0:
                raise DomainError("angle-adaptive step undefined for opposed gradients")
            return self.c / ((1.0 + ca) * math.sqrt(self.horizon))
        return (2 * t + 1) / (self.c_mu * (t + 1) ** 2)


@dataclass
class OptimizerState:
    x: np.ndarray
    schedule: Schedule = field(default_factory=Schedule)
    algorithm: str = "gd"
    t: int = 0
    fbg: np.ndarray | None = None
    fbg_age: int = 0
    refresh_interval: int = REFRESH_INTERVAL
    p_min: float = P_MIN

    def with_fbg(self, fbg) -> "OptimizerState":
        return replace(self, fbg=np.atleast_2d(np.asarray(fbg, dtype=np.float64)).copy(), fbg_age=0)


@dataclass
class StepReport:
    contributions: np.ndarray
    step: np.ndarray
    eta: float
    flags: set = field(default_factory=set)
    degenerate: list = field(default_factory=list)
    projections: np.ndarray | None = None


def _stack(grads, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows as an (L, m) array plus a presence mask (None rows are absent)."""
    if isinstance(grads, np.ndarray) and grads.ndim == 2:
        return grads.astype(np.float64, copy=False), np.ones(grads.shape[0], dtype=bool)
    rows = list(getattr(grads, "grads", grads))
    present = np.array([r is not None for r in rows], dtype=bool)
    out = np.zeros((len(rows), m))
    for i, r in enumerate(rows):
        if r is not None:
            out[i] = r
    return out, present


def step_cosine(g: np.ndarray) -> float:
    """Angle fed to the angle-adaptive schedule: the pair cosine for two classes,
    otherwise the smallest vs.-rest cosine."""
    if g.shape[0] == 2:
        n = np.linalg.norm(g, axis=1)
        if n.min() <= EPS_NORM:
            return math.nan
        return float(np.clip(g[0] @ g[1] / (n[0] * n[1]), -1.0, 1.0))
    cs = [dg.vs_rest_cosine(g, l) for l in range(g.shape[0])]
    cs = [c for c in cs if not math.isnan(c)]
    return min(cs) if cs else math.nan


def _apply(state: OptimizerState, contrib: np.ndarray, g: np.ndarray, eta, flags, degenerate, proj=None):
    if eta is None:
        eta = state.schedule(state.t, step_cosine(g))
    with np.errstate(over="ignore", invalid="ignore"):
        step = -eta * contrib.sum(axis=0)
        x = state.x + step
    if not np.all(np.isfinite(x)):
        raise DivergenceError(state.t + 1, what="parameters")
    age = state.fbg_age + 1 if state.fbg is not None else 0
    new = replace(state, x=x, t=state.t + 1, fbg_age=age)
    return new, StepReport(contrib, step, float(eta), flags, degenerate, proj)


def _sum_step(state, grads, eta):
    g, present = _stack(grads, state.x.size)
    flags = set() if present.all() else {"empty_class"}
    return _apply(state, g * present[:, None], g, eta, flags, [])


def _normalized_step(state, grads, eta, eps=EPS_NORM):
    g, present = _stack(grads, state.x.size)
    norms = np.linalg.norm(g, axis=1)
    ok = present & (norms > eps)
    contrib = np.zeros_like(g)
    contrib[ok] = g[ok] / norms[ok, None]
    flags = set()
    degenerate = np.flatnonzero(present & ~ok).tolist()
    if degenerate:
        flags.add("degenerate")
    if not present.all():
        flags.add("empty_class")
    if not ok.any():
        flags.add("stationary")
    u = contrib[ok]
    if u.shape[0] >= 2 and (u @ u.T).min() <= -1.0 + 1e-12:
        flags.add("opposed")
    return _apply(state, contrib, g, eta, flags, degenerate)


def gd_step(state: OptimizerState, grads, eta: float | None = None):
    """x - eta * sum_l g_l with full-batch, total-convention class gradients."""
    return _sum_step(state, grads, eta)


def sgd_step(state: OptimizerState, grads, eta: float | None = None):
    """Plain mini-batch step; rows are class sums over the batch divided by |B|."""
    return _sum_step(state, grads, eta)


def sgd_oversampled_step(state: OptimizerState, grads, eta: float | None = None):
    """Unnormalized sum of equal-size per-class batch means."""
    return _sum_step(state, grads, eta)


def pcngd_step(state: OptimizerState, grads, eta: float | None = None):
    """x - eta * sum_l g_l / ||g_l||; degenerate classes contribute zero."""
    return _normalized_step(state, grads, eta)


def pcnsgd_step(state: OptimizerState, grads, eta: float | None = None):
    """PCNGD update on per-class batch gradients from a per-class-ratio plan."""
    return _normalized_step(state, grads, eta)


def pcnsgd_o_step(state: OptimizerState, grads, eta: float | None = None):
    """PCNGD update on equal-size (oversampled) per-class batch gradients."""
    return _normalized_step(state, grads, eta)


def pcnsgd_r_step(state: OptimizerState, grads, fbg=None, eta: float | None = None):
    """Normalized batch gradients rescaled by 1/p_l, p_l their projection on the FBG.

    ``fbg`` defaults to the state's cache, which must be at most
    ``refresh_interval`` steps old. p_l is clamped to [p_min, 1]; the raw
    projections are returned in the report.
    """
    if fbg is None:
        if state.fbg is None or state.fbg_age > state.refresh_interval:
            raise StaleCacheError(f"FBG cache age {state.fbg_age} exceeds {state.refresh_interval}")
        fbg = state.fbg
    G = np.atleast_2d(np.asarray(fbg, dtype=np.float64))
    g, present = _stack(grads, state.x.size)
    norms = np.linalg.norm(g, axis=1)
    gnorms = np.linalg.norm(G, axis=1)
    ok = present & (norms > EPS_NORM) & (gnorms > EPS_NORM)
    proj = np.full(g.shape[0], math.nan)
    contrib = np.zeros_like(g)
    flags = set()
    for l in np.flatnonzero(ok):
        u = g[l] / norms[l]
        proj[l] = float(u @ (G[l] / gnorms[l]))
        p = min(1.0, max(state.p_min, proj[l]))
        if p != proj[l] and proj[l] < state.p_min:
            flags.add("clamped")
        contrib[l] = u / p
    degenerate = np.flatnonzero(present & ~ok).tolist()
    if degenerate:
        flags.add("degenerate")
    if not present.all():
        flags.add("empty_class")
    return _apply(state, contrib, g, eta, flags, degenerate, proj)


STEP_FUNCTIONS = {
    "gd": gd_step,
    "pcngd": pcngd_step,
    "sgd": sgd_step,
    "pcnsgd": pcnsgd_step,
    "sgd_o": sgd_oversampled_step,
    "pcnsgd_o": pcnsgd_o_step,
    "pcnsgd_r": pcnsgd_r_step,
}


# -- training loop ----------------------------------------------------------------

def check_batch_spec(algorithm: str, n_batches=None, per_class_size=None, batch_size=None) -> None:
    """Raise ConfigError when the batch fields do not fit the algorithm."""
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    given = {k: v for k, v in (("n_batches", n_batches), ("per_class_size", per_class_size),
                               ("batch_size", batch_size)) if v is not None}
    need = {"sgd": "batch_size", "pcnsgd": "n_batches", "pcnsgd_r": "n_batches",
            "sgd_o": "per_class_size", "pcnsgd_o": "per_class_size"}.get(algorithm)
    if need is None:
        if given:
            raise ConfigError(f"algorithm {algorithm!r} is full-batch but batch.{next(iter(given))} is set")
        return
    if need not in given:
        raise ConfigError(f"algorithm {algorithm!r} requires batch.{need}")
    extra = [k for k in given if k != need]
    if extra:
        raise ConfigError(f"algorithm {algorithm!r} takes batch.{need}, not batch.{extra[0]}")


@dataclass
class TrainConfig:
    train: Dataset
    test: Dataset
    model: ModelSpec
    algorithm: str
    schedule: Schedule
    epochs: int
    eval_interval: int = 1
    seed: int = 0
    n_batches: int | None = None
    per_class_size: int | None = None
    batch_size: int | None = None
    refresh_interval: int = REFRESH_INTERVAL
    p_min: float = P_MIN
    x0: np.ndarray | None = None

    def __post_init__(self):
        check_batch_spec(self.algorithm, self.n_batches, self.per_class_size, self.batch_size)
        if self.epochs < 0 or self.eval_interval < 1 or self.refresh_interval < 1:
            raise ConfigError("epochs >= 0, eval_interval >= 1 and refresh_interval >= 1 required")
        if not 0 < self.p_min <= 1:
            raise ConfigError("p_min must lie in (0, 1]")


def steps_per_epoch(cfg: TrainConfig) -> int:
    counts = cfg.train.counts
    if cfg.algorithm in FULL_BATCH:
        return 1
    if cfg.algorithm == "sgd":
        return cfg.train.n // cfg.batch_size
    if cfg.algorithm in ("pcnsgd", "pcnsgd_r"):
        return cfg.n_batches
    return int(counts.max()) // cfg.per_class_size


def planned_evals(cfg: TrainConfig) -> int:
    total = cfg.epochs * steps_per_epoch(cfg)
    return 1 + total // cfg.eval_interval + (1 if total % cfg.eval_interval else 0)


def evaluate(cfg: TrainConfig, x: np.ndarray, t: int, n_degenerate=0, n_clamped=0) -> dict:
    """One log row at step t; ``eta`` is the schedule's value for the next step."""
    spec, tr, te = cfg.model, cfg.train, cfg.test
    pcg = per_class_gradients(spec, x, tr)
    row = {"t": int(t), "eta": float(cfg.schedule(t, step_cosine(pcg.grads)))}
    rec_tr, mac_tr = dg.recall_metrics(predict(spec, x, tr.features), tr.labels, spec.n_classes)
    rec_te, mac_te = dg.recall_metrics(predict(spec, x, te.features), te.labels, spec.n_classes)
    for l in range(spec.n_classes):
        row[f"loss_train_{l}"] = float(pcg.losses[l])
        row[f"loss_test_{l}"] = per_class_loss(spec, x, te, l)
        row[f"recall_train_{l}"] = float(rec_tr[l])
        row[f"recall_test_{l}"] = float(rec_te[l])
        row[f"gradnorm_{l}"] = float(pcg.norms[l])
    row["macro_recall_train"] = mac_tr
    row["macro_recall_test"] = mac_te
    for l in range(spec.n_classes):
        c, C = dg.vs_rest_cosine(pcg.grads, l), dg.gradient_ratio(pcg.grads, l)
        row[f"cos_alpha_{l}"] = c
        row[f"C_t_{l}"] = C
        row[f"eq1_margin_{l}"] = dg.gd_monotonicity_margin(c, C)
    full = full_gradient(spec, x, tr)
    row["decomp_residual"] = float(np.linalg.norm(full - pcg.total) / (1.0 + np.linalg.norm(full)))
    row["flag_degenerate"] = int(n_degenerate)
    row["flag_clamped"] = int(n_clamped)
    losses = [row[f"loss_train_{l}"] for l in range(spec.n_classes)]
    losses += [row[f"loss_test_{l}"] for l in range(spec.n_classes)]
    if not all(math.isfinite(v) for v in losses):
        raise DivergenceError(t)
    return row


def batch_gradients(cfg: TrainConfig, x: np.ndarray, step_idx: list[np.ndarray]) -> list:
    """Per-class rows for one planned step (None for classes absent from it)."""
    tr, spec = cfg.train, cfg.model
    out = []
    if cfg.algorithm == "sgd":
        size = sum(idx.size for idx in step_idx)
        for idx in step_idx:
            out.append(per_class_gradient(spec, x, tr.features, tr.labels, idx, "total", size))
        return out
    for idx in step_idx:
        out.append(per_class_gradient(spec, x, tr.features, tr.labels, idx, "batch"))
    return out


def make_plan(cfg: TrainConfig, rng: SeededRng):
    if cfg.algorithm == "sgd":
        return plan_uniform_batches(cfg.train, cfg.batch_size, rng)
    if cfg.algorithm in ("pcnsgd", "pcnsgd_r"):
        return plan_per_class_ratio_batches(cfg.train, cfg.n_batches, rng)
    return plan_oversampled_batches(cfg.train, cfg.per_class_size, rng)


def run_training(cfg: TrainConfig, on_step=None) -> dg.RunLog:
    """Train for ``cfg.epochs`` epochs and return the evaluation log.

    Rows are written at t = 0, every ``eval_interval`` steps and after the
    last step. ``on_step(state, report, batch)`` is called after every update.
    Raises DivergenceError (carrying the partial log) on a non-finite loss.
    """
    spec = cfg.model
    x0 = cfg.x0 if cfg.x0 is not None else init_params(spec, SeededRng(cfg.seed, "init"))
    state = OptimizerState(np.array(x0, dtype=np.float64), cfg.schedule, cfg.algorithm,
                           refresh_interval=cfg.refresh_interval, p_min=cfg.p_min)
    log = dg.RunLog(spec.n_classes, planned_evals(cfg), cfg.eval_interval)
    rng = SeededRng(cfg.seed, "batching")
    step_fn = STEP_FUNCTIONS[cfg.algorithm]
    n_deg = n_clamp = 0

    def record():
        try:
            log.append(evaluate(cfg, state.x, state.t, n_deg, n_clamp))
        except DivergenceError as err:
            err.log = log
            raise

    def fbg():
        return per_class_gradients(spec, state.x, cfg.train, with_losses=False).grads

    record()
    for _ in range(cfg.epochs):
        if cfg.algorithm in FULL_BATCH:
            batches = [None]
        else:
            batches = make_plan(cfg, rng).steps
        if cfg.algorithm == "pcnsgd_r":
            state = state.with_fbg(fbg())
        for idx in batches:
            if idx is None:
                grads = per_class_gradients(spec, state.x, cfg.train, with_losses=False).grads
            else:
                if cfg.algorithm == "pcnsgd_r" and state.fbg_age >= state.refresh_interval:
                    state = state.with_fbg(fbg())
                grads = batch_gradients(cfg, state.x, idx)
            try:
                state, rep = step_fn(state, grads)
            except DivergenceError as err:
                err.log = log
                raise
            n_deg += "degenerate" in rep.flags
            n_clamp += "clamped" in rep.flags
            if on_step is not None:
                on_step(state, rep, idx)
            if state.t % cfg.eval_interval == 0:
                record()
                n_deg = n_clamp = 0
    if log.rows[-1]["t"] != state.t:
        record()
    return log
