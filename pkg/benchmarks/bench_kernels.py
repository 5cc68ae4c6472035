"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 100 400 1600]

The first numba call compiles (or loads the on-disk cache); it is timed
separately and excluded from the per-call figures.
"""
import argparse
import time
import timeit

import numpy as np

from hprosody import kernels
from hprosody._accel import USE_NUMBA


def cases(n, rng):
    cost = rng.uniform(0.0, 5.0, size=(n, n + n // 3))
    acc = kernels.dtw_accumulate_numpy(cost)
    wave = np.sin(np.linspace(0.0, 2 * np.pi * n / 8, n * 64)) + 0.1 * rng.standard_normal(n * 64)
    return {
        "dtw_accumulate": ((cost,), kernels.dtw_accumulate_numba, kernels.dtw_accumulate_numpy),
        "dtw_backtrack": ((acc,), kernels.dtw_backtrack_numba, kernels.dtw_backtrack_numpy),
        "crossing_events": ((wave, True), kernels.crossing_events_numba,
                            kernels.crossing_events_numpy),
    }


def best(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 400, 1600])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"numba enabled for library calls: {USE_NUMBA}")
    warm = cases(8, rng)
    for name, (a, jit, _) in warm.items():
        t0 = time.perf_counter()
        jit(*a)
        print(f"{name:16s} first numba call {1e3 * (time.perf_counter() - t0):8.1f} ms")
    print()
    print(f"{'kernel':16s} {'n':>6s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for n in args.sizes:
        for name, (a, jit, ref) in cases(n, rng).items():
            np.testing.assert_array_equal(jit(*a), ref(*a))
            t_ref, t_jit = best(ref, a, args.repeat), best(jit, a, args.repeat)
            print(f"{name:16s} {n:6d} {1e3 * t_ref:10.3f} {1e3 * t_jit:10.3f} "
                  f"{t_ref / t_jit:7.1f}x")


if __name__ == "__main__":
    main()
