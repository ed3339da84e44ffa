"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--rows 200000] [--mean-impressions 20] [--repeat 5]

Each kernel runs once per backend for warm-up (JIT compilation), then the
best of ``--repeat`` timed calls is reported.  Outputs are checked for
bit-identity before timing.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from surroprev import _kernels


def cases(rows: int, mean_impressions: float, seed: int):
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, 2**63, size=rows, dtype=np.uint64)
    counts = rng.geometric(1.0 / mean_impressions, size=rows).astype(np.int64)
    probs = rng.beta(0.5, 10.0, size=rows)
    counters = rng.integers(0, 1000, size=rows, dtype=np.int64)
    return {
        "finalize64": lambda b: _kernels.finalize64(keys, backend=b),
        "stream_uniforms": lambda b: _kernels.stream_uniforms(keys, counters, backend=b),
        "exact_flag_counts": lambda b: _kernels.exact_flag_counts(keys, counts, probs, backend=b),
    }, int(counts.sum())


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--rows", type=int, default=200_000)
    p.add_argument("--mean-impressions", type=float, default=20.0)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    kernels, total = cases(args.rows, args.mean_impressions, args.seed)
    print(f"{args.rows} rows, {total} impressions, best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in kernels.items():
        if not np.array_equal(fn("numpy"), fn("numba")):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 2
        t = {b: min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3 for b in ("numpy", "numba")}
        print(f"{name:<20}{t['numpy']:>12.2f}{t['numba']:>12.2f}{t['numpy'] / t['numba']:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
