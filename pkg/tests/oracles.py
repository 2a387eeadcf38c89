"""Slow, straight-line reference computations used as independent test oracles."""

import math

import numpy as np


def pair_count_auc(y, s):
    pos = s[y == 1]
    neg = s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def naive_delong(y, s):
    """AUC and variance from O(n^2) structural components."""
    x = s[y == 1]
    z = s[y == 0]
    psi = (x[:, None] > z[None, :]).astype(float) + 0.5 * (x[:, None] == z[None, :])
    v10 = psi.mean(axis=1)
    v01 = psi.mean(axis=0)
    m, n = x.size, z.size
    s10 = ((v10 - v10.mean()) ** 2).sum() / (m - 1)
    s01 = ((v01 - v01.mean()) ** 2).sum() / (n - 1)
    return psi.mean(), s10 / m + s01 / n


def enumerate_aupr(y, s):
    """Step-rule AP by brute force over every distinct threshold."""
    n_pos = int(y.sum())
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        pred = s >= t
        tp = int((pred & (y == 1)).sum())
        fp = int((pred & (y == 0)).sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def softmax(v):
    v = np.asarray(v, dtype=float)
    e = np.array([math.exp(a - max(v)) for a in v])
    return e / e.sum()


def random_instance(rng, n_max=200, ties=True):
    n = int(rng.integers(4, n_max + 1))
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    s = rng.normal(size=n) + 0.8 * y
    if ties:
        # quantise a random subset to inject ties
        k = int(rng.integers(0, n))
        idx = rng.choice(n, size=k, replace=False)
        s[idx] = np.round(s[idx] * 2) / 2
    return y, s
