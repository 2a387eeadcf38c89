"""Classification metrics and their confidence intervals.

AUC uses the Mann-Whitney convention (ties count one half), with DeLong's
structural-component variance for its CI. ACC and AUPR get percentile
bootstrap CIs. AUPR is the non-interpolated step rule: the sum over distinct
score thresholds (descending) of recall increment times precision.
"""

from __future__ import annotations

import logging
import os
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

log = logging.getLogger(__name__)

if os.environ.get("CXRSSL_PURE_PYTHON"):
    from . import _pykernels as _k

    BACKEND = "python"
else:
    try:
        from . import _kernels as _k

        BACKEND = "cython"
    except ImportError:
        from . import _pykernels as _k

        BACKEND = "python"


class ConfidenceInterval(NamedTuple):
    value: float
    lo: float
    hi: float


def _prepare(labels, scores):
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.ndim != 1 or s.shape != y.shape:
        raise ValueError(f"labels {y.shape} and scores {s.shape} must be matching 1-D arrays")
    if y.size == 0:
        raise ValueError("empty input")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return y.astype(np.int64), s


def _require_both(y):
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("need at least one positive and one negative")
    return n_pos, y.size - n_pos


def _sorted_groups(y, s):
    """Descending-score order plus the start index of each tied group."""
    order = np.argsort(-s, kind="mergesort")
    ss = s[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]]).astype(np.int64)
    return order, np.ascontiguousarray(y[order]), starts


def midranks(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty_like(x)
    ranks[order] = _k.midranks_sorted(np.ascontiguousarray(x[order]))
    return ranks


def roc_auc(labels, scores) -> float:
    """Probability a random positive outranks a random negative, ties counted 1/2."""
    y, s = _prepare(labels, scores)
    m, n = _require_both(y)
    r = midranks(s)
    return float((r[y == 1].sum() - m * (m + 1) / 2.0) / (m * n))


def delong_placements(labels, scores):
    """AUC and the DeLong placement values ``(V10 per positive, V01 per negative)``."""
    y, s = _prepare(labels, scores)
    m, n = _require_both(y)
    x, z = s[y == 1], s[y == 0]
    tz = midranks(np.concatenate([x, z]))
    tx, ty = midranks(x), midranks(z)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    auc = float(v10.mean())
    return auc, v10, v01


def delong_variance(labels, scores) -> tuple[float, float]:
    auc, v10, v01 = delong_placements(labels, scores)
    if v10.size < 2 or v01.size < 2:
        raise ValueError("DeLong variance needs at least two positives and two negatives")
    var = v10.var(ddof=1) / v10.size + v01.var(ddof=1) / v01.size
    return auc, float(var)


def delong_ci(labels, scores, alpha: float = 0.05) -> ConfidenceInterval:
    auc, var = delong_variance(labels, scores)
    if var <= 0:
        return ConfidenceInterval(auc, auc, auc)
    half = norm.ppf(1 - alpha / 2) * np.sqrt(var)
    return ConfidenceInterval(auc, float(max(0.0, auc - half)), float(min(1.0, auc + half)))


def aupr(labels, scores) -> float:
    y, s = _prepare(labels, scores)
    if y.sum() == 0:
        raise ValueError("AUPR needs at least one positive")
    _, ys, starts = _sorted_groups(y, s)
    return float(_k.weighted_aupr(np.ones((1, y.size), dtype=np.int64), ys, starts)[0])


def accuracy(labels, scores, threshold: float = 0.5) -> float:
    y, s = _prepare(labels, scores)
    return float(((s >= threshold).astype(np.int64) == y).mean())


def confusion_metrics(labels, scores, threshold: float = 0.5):
    """``(ACC, TPR, TNR)`` with ``score >= threshold`` predicted positive.

    TPR (TNR) is ``nan`` when there are no positives (negatives).
    """
    y, s = _prepare(labels, scores)
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    tn = int((~pred & (y == 0)).sum())
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    acc = (tp + tn) / y.size
    tpr = tp / n_pos if n_pos else float("nan")
    tnr = tn / n_neg if n_neg else float("nan")
    return acc, tpr, tnr


def roc_curve(labels, scores):
    """``(fpr, tpr, thresholds)``: the origin (threshold +inf) then one point per distinct score."""
    y, s = _prepare(labels, scores)
    m, n = _require_both(y)
    order, ys, starts = _sorted_groups(y, s)
    tp = np.add.reduceat(ys, starts).cumsum()
    fp = np.add.reduceat(1 - ys, starts).cumsum()
    thr = s[order][starts]
    return (np.r_[0.0, fp / n], np.r_[0.0, tp / m], np.r_[np.inf, thr])


def pr_curve(labels, scores):
    """``(recall, precision, thresholds)``, one point per distinct score, descending threshold."""
    y, s = _prepare(labels, scores)
    if y.sum() == 0:
        raise ValueError("precision-recall curve needs at least one positive")
    order, ys, starts = _sorted_groups(y, s)
    tp = np.add.reduceat(ys, starts).cumsum()
    fp = np.add.reduceat(1 - ys, starts).cumsum()
    return tp / y.sum(), tp / (tp + fp), s[order][starts]


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

_SWEEPS = {"aupr": "weighted_aupr", "auc": "weighted_auc"}


def _resample_counts(rng, y, n_boot, max_retries):
    n = y.size
    idx = rng.integers(0, n, size=(n_boot, n))
    ok = _has_both(y[idx])
    for _ in range(max_retries):
        bad = np.flatnonzero(~ok)
        if bad.size == 0:
            break
        idx[bad] = rng.integers(0, n, size=(bad.size, n))
        ok[bad] = _has_both(y[idx[bad]])
    idx = idx[ok]
    flat = (idx + n * np.arange(idx.shape[0])[:, None]).ravel()
    counts = np.bincount(flat, minlength=idx.shape[0] * n).reshape(idx.shape[0], n)
    return counts.astype(np.int64), int((~ok).sum())


def _has_both(yy):
    s = yy.sum(axis=1)
    return (s > 0) & (s < yy.shape[1])


def bootstrap_distribution(metric, labels, scores, n_boot: int = 2000, seed=0,
                           threshold: float = 0.5, max_retries: int = 100):
    """Metric values over ``n_boot`` case resamples, and the number of skipped resamples.

    ``metric`` is ``"acc"``, ``"aupr"``, ``"auc"`` or a callable
    ``(labels, scores) -> float``. Resamples lacking either class are redrawn up
    to ``max_retries`` times, then skipped.
    """
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    y, s = _prepare(labels, scores)
    rng = np.random.default_rng(seed)
    counts, skipped = _resample_counts(rng, y, n_boot, max_retries)
    if metric == "acc":
        correct = ((s >= threshold).astype(np.int64) == y).astype(np.float64)
        return counts @ correct / y.size, skipped
    if metric in _SWEEPS:
        order, ys, starts = _sorted_groups(y, s)
        c = np.ascontiguousarray(counts[:, order])
        return getattr(_k, _SWEEPS[metric])(c, ys, starts), skipped
    if callable(metric):
        vals = np.array([metric(np.repeat(y, c), np.repeat(s, c)) for c in counts])
        return vals, skipped
    raise ValueError(f"unknown metric {metric!r}")


def _point(metric, y, s, threshold):
    if metric == "acc":
        return accuracy(y, s, threshold)
    if metric == "aupr":
        return aupr(y, s)
    if metric == "auc":
        return roc_auc(y, s)
    return float(metric(y, s))


def bootstrap_ci(metric, labels, scores, n_boot: int = 2000, seed=0, alpha: float = 0.05,
                 threshold: float = 0.5, max_retries: int = 100) -> ConfidenceInterval:
    """Percentile bootstrap CI around the full-sample metric value.

    Bounds are clipped to [0, 1] and widened, if needed, to contain the point
    estimate.
    """
    value = _point(metric, np.asarray(labels), np.asarray(scores, dtype=np.float64), threshold)
    vals, skipped = bootstrap_distribution(metric, labels, scores, n_boot, seed, threshold,
                                           max_retries)
    if skipped:
        log.warning("bootstrap: %d of %d resamples skipped (single class)", skipped, n_boot)
    if vals.size == 0:
        return ConfidenceInterval(value, value, value)
    lo, hi = np.percentile(vals, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    lo = min(max(float(lo), 0.0), value)
    hi = max(min(float(hi), 1.0), value)
    return ConfidenceInterval(value, lo, hi)
