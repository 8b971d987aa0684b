"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Compilation is triggered once before timing.  Results are printed as a
table of best-of-N wall times per call.
"""
import argparse
import timeit

import numpy as np

from mevauction import _accel


def inputs(rng):
    n = 2048
    gae_args = (rng.normal(size=n), rng.normal(size=n), (rng.random(n) < 0.01).astype(float), 0.0, 0.99, 0.95)
    m = 100_000
    tally_args = (rng.random(m), rng.random(m), rng.lognormal(size=m), 1e-9)
    sizes = rng.integers(0, 6, size=m)
    indptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    k = int(indptr[-1])
    seg_args = (indptr, rng.random(k), rng.exponential(150.0, k), rng.random(k) < 0.9, 250.0)
    return {"gae (n=2048)": ("gae", gae_args), "tally (n=100k)": ("tally", tally_args),
            "segment_max (100k segments)": ("segment_max", seg_args)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed")
    print(f"{'kernel':<30} {'numpy [ms]':>12} {'numba [ms]':>12} {'speedup':>9}")
    for label, (name, a) in inputs(np.random.default_rng(0)).items():
        fast, slow = getattr(_accel, f"{name}_numba"), getattr(_accel, f"{name}_numpy")
        fast(*a)  # compile
        times = []
        for fn in (slow, fast):
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*a), number=1), 1e-6)))
            times.append(min(timeit.repeat(lambda: fn(*a), number=number, repeat=args.repeat)) / number * 1e3)
        print(f"{label:<30} {times[0]:>12.3f} {times[1]:>12.3f} {times[0] / times[1]:>8.1f}x")


if __name__ == "__main__":
    main()
