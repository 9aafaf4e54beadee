"""Timing comparison of the compiled kernels against their numpy twins.

Run directly:

    python3 benchmarks/bench_kernels.py [--repeats N]

Each kernel is timed on a workload shaped like its real call site (event
synthesis, anti-alias filtering, multilateration grid scoring, chamfer
nearest-neighbor search). Without numba installed only the numpy column
is reported; VIBROLOC_NO_NUMBA has no effect here because both twins are
invoked directly.
"""
import argparse
import time

import numpy as np

from vibroloc import kernels
from vibroloc._accel import HAVE_NUMBA


def best_of(fn, repeats: int) -> float:
    fn()  # warm up caches and trigger jit compilation
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def workloads(rng):
    n, fs = 32000, 16000.0
    k = 28
    mix_args = (n, fs, 1.0,
                rng.uniform(0.0, 0.003, 6), rng.uniform(0.2, 1.0, 6),
                rng.uniform(100.0, 7000.0, k), rng.uniform(8.0, 90.0, k),
                rng.uniform(0.01, 0.3, k), rng.uniform(-np.pi, np.pi, k))
    x = rng.normal(size=n)
    bq_args = (x, 0.2, 0.4, 0.2, -0.3, 0.2)
    pred = rng.normal(size=(36000, 15))
    obs = rng.normal(size=15)
    a = rng.normal(size=(200, 3))
    b = rng.normal(size=(30000, 3))
    return [
        ("mix_components", mix_args,
         kernels.mix_components_numpy, kernels._mix_components_jit),
        ("biquad", bq_args, kernels.biquad_numpy, kernels._biquad_jit),
        ("grid_sse", (pred, obs), kernels.grid_sse_numpy, kernels._grid_sse_jit),
        ("min_sqdist", (a, b), kernels.min_sqdist_numpy, kernels._min_sqdist_jit),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"numba available: {HAVE_NUMBA}")
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}   agreement")
    for name, call_args, numpy_fn, jit_fn in workloads(rng):
        t_np = best_of(lambda: numpy_fn(*call_args), args.repeats)
        if not HAVE_NUMBA:
            print(f"{name:<16} {t_np * 1e3:>10.3f} {'-':>10} {'-':>8}")
            continue
        t_jit = best_of(lambda: jit_fn(*call_args), args.repeats)
        gap = float(np.max(np.abs(numpy_fn(*call_args) - jit_fn(*call_args))))
        print(f"{name:<16} {t_np * 1e3:>10.3f} {t_jit * 1e3:>10.3f} "
              f"{t_np / t_jit:>7.1f}x   max|diff| {gap:.2e}")


if __name__ == "__main__":
    main()
