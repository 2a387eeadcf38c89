# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sweep kernels for rank statistics and bootstrap resamples.

All sweeps take data already sorted by descending score, with ``starts``
marking the first position of each tied-score group, and integer case weights
``counts`` (one row per resample; a row of ones is the plain sample).
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def midranks_sorted(const double[::1] xs):
    """1-based average ranks of an ascending-sorted vector."""
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t i = 0, j, k
    cdef double r
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    while i < n:
        j = i
        while j < n and xs[j] == xs[i]:
            j += 1
        r = 0.5 * (i + j - 1) + 1.0
        for k in range(i, j):
            o[k] = r
        i = j
    return out


def weighted_aupr(const cnp.int64_t[:, ::1] counts, const cnp.int64_t[::1] y,
                  const cnp.int64_t[::1] starts):
    """Step-rule average precision for every weight row."""
    cdef Py_ssize_t b_count = counts.shape[0], n = counts.shape[1]
    cdef Py_ssize_t g_count = starts.shape[0]
    cdef Py_ssize_t b, g, i, end
    cdef double tp, fp, gtp, gfp, total_pos, ap
    out = np.empty(b_count, dtype=np.float64)
    cdef double[::1] o = out
    for b in range(b_count):
        total_pos = 0.0
        for i in range(n):
            if y[i]:
                total_pos += counts[b, i]
        if total_pos == 0:
            o[b] = np.nan
            continue
        tp = 0.0
        fp = 0.0
        ap = 0.0
        for g in range(g_count):
            end = starts[g + 1] if g + 1 < g_count else n
            gtp = 0.0
            gfp = 0.0
            for i in range(starts[g], end):
                if y[i]:
                    gtp += counts[b, i]
                else:
                    gfp += counts[b, i]
            tp += gtp
            fp += gfp
            if gtp > 0:
                ap += (gtp / total_pos) * (tp / (tp + fp))
        o[b] = ap
    return out


def weighted_auc(const cnp.int64_t[:, ::1] counts, const cnp.int64_t[::1] y,
                 const cnp.int64_t[::1] starts):
    """Mann-Whitney AUC (ties count one half) for every weight row."""
    cdef Py_ssize_t b_count = counts.shape[0], n = counts.shape[1]
    cdef Py_ssize_t g_count = starts.shape[0]
    cdef Py_ssize_t b, g, i, end
    cdef double pos_above, gpos, gneg, num, total_neg
    out = np.empty(b_count, dtype=np.float64)
    cdef double[::1] o = out
    for b in range(b_count):
        pos_above = 0.0
        total_neg = 0.0
        num = 0.0
        for g in range(g_count):
            end = starts[g + 1] if g + 1 < g_count else n
            gpos = 0.0
            gneg = 0.0
            for i in range(starts[g], end):
                if y[i]:
                    gpos += counts[b, i]
                else:
                    gneg += counts[b, i]
            num += gneg * (pos_above + 0.5 * gpos)
            pos_above += gpos
            total_neg += gneg
        if pos_above == 0 or total_neg == 0:
            o[b] = np.nan
        else:
            o[b] = num / (pos_above * total_neg)
    return out
