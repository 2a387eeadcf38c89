"""Vectorised numpy versions of the compiled sweep kernels (same signatures)."""

import numpy as np
from scipy.stats import rankdata


def midranks_sorted(xs):
    return rankdata(xs, method="average").astype(np.float64)


def _group_sums(counts, y, starts):
    counts = np.asarray(counts, dtype=np.float64)
    pos = np.add.reduceat(counts * y, starts, axis=1)
    neg = np.add.reduceat(counts * (1 - y), starts, axis=1)
    return pos, neg


def weighted_aupr(counts, y, starts):
    gpos, gneg = _group_sums(counts, y, starts)
    tp = np.cumsum(gpos, axis=1)
    fp = np.cumsum(gneg, axis=1)
    total = tp[:, -1]
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1e-300), 0.0)
        ap = ((gpos / total[:, None]) * precision).sum(axis=1)
    ap[total == 0] = np.nan
    return ap


def weighted_auc(counts, y, starts):
    gpos, gneg = _group_sums(counts, y, starts)
    pos_above = np.cumsum(gpos, axis=1) - gpos
    num = (gneg * (pos_above + 0.5 * gpos)).sum(axis=1)
    p = gpos.sum(axis=1)
    n = gneg.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        auc = num / (p * n)
    auc[(p == 0) | (n == 0)] = np.nan
    return auc
