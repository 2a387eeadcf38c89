"""Time the compiled eval kernels against the numpy fallback.

Both backends are imported directly, so one process measures both. Each
kernel runs on a bootstrap count matrix of the size the report builds
(B resamples x n cases), and the outputs are checked for agreement before
timing.

    python3 benchmarks/bench_kernels.py [--n 200] [--boot 2000] [--repeat 5]
"""

import argparse
import sys
import timeit

import numpy as np

from cxrssl.eval import _pykernels as py
from cxrssl.eval.metrics import _resample_counts, _sorted_groups

try:
    from cxrssl.eval import _kernels as cy
except ImportError:
    cy = None


def workload(n, n_boot, seed=0):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.3).astype(np.int64)
    y[:2] = (0, 1)
    s = np.round(rng.normal(size=n) + y, 2)  # rounding leaves some tied scores
    counts, _ = _resample_counts(rng, y, n_boot, max_retries=100)
    order, ys, starts = _sorted_groups(y, s)
    # midranks runs once per DeLong call, on all pooled scores; use a long vector
    xs = np.sort(np.round(rng.normal(size=n * n_boot // 10), 3))
    return np.ascontiguousarray(counts[:, order]), ys, starts, xs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200, help="cases per sample")
    ap.add_argument("--boot", type=int, default=2000, help="bootstrap resamples")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if cy is None:
        print("compiled kernels not built; run `pip install --no-build-isolation -e .` first")
        return 1

    counts, ys, starts, xs = workload(args.n, args.boot)
    cases = {
        "weighted_aupr": lambda k: k.weighted_aupr(counts, ys, starts),
        "weighted_auc": lambda k: k.weighted_auc(counts, ys, starts),
        "midranks_sorted": lambda k: k.midranks_sorted(xs),
    }
    print(f"n={args.n} B={args.boot} repeat={args.repeat} (best of, milliseconds)")
    print(f"{'kernel':<16} {'cython':>10} {'numpy':>10} {'speedup':>8}")
    for name, call in cases.items():
        diff = np.max(np.abs(np.asarray(call(cy)) - np.asarray(call(py))))
        if diff > 1e-12:
            print(f"{name}: backends disagree by {diff:.3g}", file=sys.stderr)
            return 1
        t_cy = min(timeit.repeat(lambda: call(cy), number=1, repeat=args.repeat)) * 1e3
        t_py = min(timeit.repeat(lambda: call(py), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16} {t_cy:>10.2f} {t_py:>10.2f} {t_py / t_cy:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
