"""Measured quantities of a run: recall curves, gradient geometry, MID and tau.

Per-class gradient geometry is reported "vs. rest": for class l the angle
alpha^(l) is taken between g_l and the sum of the other classes' gradients,
and C_t^(l) = ||sum_{i != l} g_i|| / ||g_l||. For two classes and l = 0 this
is the usual binary ratio ||g_1|| / ||g_0||.

Undefined quantities (degenerate norms) are reported as NaN.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import EPS_NORM, SeededRng

P_MIN = 0.05
INF = math.inf


def _rows(grads) -> np.ndarray:
    g = getattr(grads, "grads", grads)
    return np.atleast_2d(np.asarray(g, dtype=np.float64))


def gradient_ratio(grads, l: int = 0, eps: float = EPS_NORM) -> float:
    """C_t^(l) = ||sum_{i != l} g_i|| / ||g_l||; NaN if ||g_l|| <= eps."""
    g = _rows(grads)
    den = np.linalg.norm(g[l])
    if den <= eps:
        return math.nan
    return float(np.linalg.norm(g.sum(axis=0) - g[l]) / den)


def normalized_gradient_ratio(grads, l: int = 0, eps: float = EPS_NORM) -> float:
    """||sum_{i != l} g_i / ||g_i|| ||, skipping degenerate classes."""
    g = _rows(grads)
    norms = np.linalg.norm(g, axis=1)
    keep = (np.arange(g.shape[0]) != l) & (norms > eps)
    if not keep.any():
        return 0.0
    return float(np.linalg.norm((g[keep] / norms[keep, None]).sum(axis=0)))


def vs_rest_cosine(grads, l: int = 0, normalized: bool = False, eps: float = EPS_NORM) -> float:
    """Cosine between g_l and the (optionally normalized) sum of the others."""
    g = _rows(grads)
    norms = np.linalg.norm(g, axis=1)
    others = np.arange(g.shape[0]) != l
    if normalized:
        keep = others & (norms > eps)
        rest = (g[keep] / norms[keep, None]).sum(axis=0)
    else:
        rest = g[others].sum(axis=0)
    nr = np.linalg.norm(rest)
    if norms[l] <= eps or nr <= eps:
        return math.nan
    return float(np.clip(g[l] @ rest / (norms[l] * nr), -1.0, 1.0))


def gd_monotonicity_margin(cos_alpha: float, c_t: float) -> float:
    """1 + cos(alpha) * C_t; positive means the class loss can decrease under GD."""
    return 1.0 + cos_alpha * c_t


def recall_metrics(predictions, labels, n_classes: int | None = None) -> tuple[np.ndarray, float]:
    """Per-class recall (NaN for classes absent from ``labels``) and macro recall."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    L = n_classes if n_classes is not None else int(max(labels.max(initial=-1), predictions.max(initial=-1)) + 1)
    support = np.bincount(labels, minlength=L)[:L]
    hits = np.bincount(labels[predictions == labels], minlength=L)[:L]
    recall = np.full(L, math.nan)
    ok = support > 0
    recall[ok] = hits[ok] / support[ok]
    if not ok.all():
        warnings.warn(f"classes {np.flatnonzero(~ok).tolist()} have no examples; excluded from macro recall",
                      RuntimeWarning, stacklevel=2)
    macro = float(recall[ok].mean()) if ok.any() else math.nan
    return recall, macro


def fixed_point_ratio(grads, counts=None, eps: float = EPS_NORM) -> tuple[float, float]:
    """(cos(g_0, g_1), gamma) with gamma the ratio of class-mean gradient norms.

    ``grads`` are total-convention class gradients; given ``counts`` they are
    turned into class means (divided by n_l) before taking the norm ratio.
    """
    g = _rows(grads)[:2]
    if counts is not None:
        g = g / np.asarray(counts, dtype=np.float64)[:2, None]
    n0, n1 = np.linalg.norm(g, axis=1)
    if n0 <= eps or n1 <= eps:
        return math.nan, math.nan
    return float(np.clip(g[0] @ g[1] / (n0 * n1), -1.0, 1.0)), float(n0 / n1)


def rescaling_factor(major_term: float, minor_term: float, floor: float = P_MIN) -> tuple[float, bool]:
    """Ratio of the majority to the minority (1 - attenuation) terms.

    A minority term below ``floor`` is raised to it and the result flagged.
    """
    clamped = minor_term < floor
    return float(major_term / max(minor_term, floor)), bool(clamped)


# -- CLT directional-noise check ------------------------------------------------

@dataclass
class CltCheck:
    n_tilde: int
    predicted: float
    measured: float
    stderr: float
    predicted_stderr: float
    n_draws: int

    @property
    def attenuation(self) -> float:
        return 1.0 - self.measured


def clt_projection_check(
    fbg,
    n_tilde: int,
    n_draws: int = 10_000,
    rng: SeededRng | None = None,
    noise_cov=None,
    examples=None,
) -> CltCheck:
    """Predicted vs. Monte-Carlo projection of a normalized batch gradient on the FBG.

    Either ``noise_cov`` (diagonal of the per-example noise covariance, noise
    model g_hat = G + Z / sqrt(n_tilde)) or ``examples`` (rows are per-example
    gradients; batches drawn without replacement, Z = sqrt(n_tilde)(g_hat - G))
    must be given. ``fbg`` is G; with ``examples`` it is normally their mean.
    Per draw the prediction is 1 - ||Z||^2 sin^2(theta) / (2 n_tilde ||G||^2)
    with theta the angle between Z and G; both sides are averaged over draws.
    """
    G = np.asarray(fbg, dtype=np.float64)
    gn = np.linalg.norm(G)
    if gn <= EPS_NORM:
        return CltCheck(n_tilde, math.nan, math.nan, math.nan, math.nan, 0)
    rng = rng or SeededRng(0, "noise")
    if (noise_cov is None) == (examples is None):
        raise ValueError("give exactly one of noise_cov or examples")
    if noise_cov is not None:
        Z = np.sqrt(np.asarray(noise_cov, dtype=np.float64)) * rng.standard_normal((n_draws, G.size))
        ghat = G + Z / math.sqrt(n_tilde)
    else:
        ex = np.asarray(examples, dtype=np.float64)
        if not 1 <= n_tilde <= ex.shape[0]:
            raise ValueError("batch size outside [1, number of examples]")
        ghat = np.empty((n_draws, G.size))
        for k in range(n_draws):
            ghat[k] = ex[rng.permutation(ex.shape[0])[:n_tilde]].mean(axis=0)
        Z = math.sqrt(n_tilde) * (ghat - G)
    u = G / gn
    zz = np.einsum("ij,ij->i", Z, Z)
    zpar = Z @ u
    sin2 = np.where(zz > 0, 1.0 - zpar**2 / np.where(zz > 0, zz, 1.0), 0.0)
    pred = 1.0 - zz * sin2 / (2.0 * n_tilde * gn**2)
    meas = (ghat @ u) / np.linalg.norm(ghat, axis=1)
    se = lambda v: float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return CltCheck(n_tilde, float(pred.mean()), float(meas.mean()), se(meas), se(pred), n_draws)


# -- run logs -----------------------------------------------------------------

def runlog_columns(n_classes: int) -> list[str]:
    cols = ["t", "eta"]
    for l in range(n_classes):
        cols += [f"loss_train_{l}", f"loss_test_{l}", f"recall_train_{l}", f"recall_test_{l}", f"gradnorm_{l}"]
    cols += ["macro_recall_train", "macro_recall_test"]
    for l in range(n_classes):
        cols += [f"cos_alpha_{l}", f"C_t_{l}", f"eq1_margin_{l}"]
    cols += ["decomp_residual", "flag_degenerate", "flag_clamped"]
    return cols


def fmt(v) -> str:
    """Deterministic CSV text for a number: ints as ints, floats via repr."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class RunLog:
    """Evaluation rows of one run, in time order.

    ``planned_evals`` is the number of evaluations the run was scheduled to
    produce; the default MID window is derived from it (not from ``len``) so
    that appending rows never changes the window.
    """

    n_classes: int
    planned_evals: int = 0
    eval_interval: int = 1
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return runlog_columns(self.n_classes)

    def append(self, row: dict) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise KeyError(f"row lacks columns {sorted(missing)}")
        if self.rows and row["t"] <= self.rows[-1]["t"]:
            raise ValueError("rows must be strictly time-ordered")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        cols = self.columns
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([fmt(r[c]) for c in cols])

    @classmethod
    def from_csv(cls, path, planned_evals: int = 0, eval_interval: int = 1) -> "RunLog":
        with open(path, encoding="utf-8", newline="") as fh:
            rd = csv.DictReader(fh)
            rows = [{k: float(v) for k, v in r.items()} for r in rd]
            header = rd.fieldnames or []
        n_classes = sum(1 for c in header if c.startswith("gradnorm_"))
        log = cls(n_classes, planned_evals, eval_interval)
        for r in rows:
            r["t"] = int(r["t"])
            log.rows.append(r)
        return log


@dataclass
class MidReport:
    mid_present: bool
    mid_depth: float
    mid_duration: float
    tau: float
    tau_uncertainty: float
    initial_recall: float
    window: int


def default_window(planned_evals: int) -> int:
    return max(1, math.ceil(0.2 * planned_evals))


def detect_mid(
    log: RunLog,
    minority: int,
    window: int | None = None,
    delta: float = 0.05,
    r_star: float = 0.7,
) -> MidReport:
    """Minority initial drop and characteristic time tau from a run log.

    The window counts evaluation rows starting with the initial one. MID is
    present iff the minority test recall inside the window falls below its
    initial value minus ``delta``; the depth is the largest drop there. The
    duration is the number of steps from the first such drop until recall is
    back to at least initial - delta (inf if never). tau is the first logged
    step where macro test recall reaches ``r_star`` (inf if never).
    """
    if not log.rows:
        raise ValueError("empty run log")
    W = window if window is not None else default_window(log.planned_evals or len(log))
    rec = log.column(f"recall_test_{minority}")
    t = log.column("t")
    r0 = rec[0]
    head = rec[:W]
    depth = max(0.0, float(r0 - head.min()))
    present = bool(head.min() < r0 - delta)
    duration = 0.0
    if present:
        first = int(np.argmax(head < r0 - delta))
        back = np.flatnonzero(rec[first:] >= r0 - delta)
        duration = float(t[first + back[0]] - t[first]) if back.size else INF
    macro = log.column("macro_recall_test")
    hit = np.flatnonzero(macro >= r_star)
    tau = float(t[hit[0]]) if hit.size else INF
    return MidReport(present, depth, duration, tau, float(log.eval_interval), float(r0), W)
