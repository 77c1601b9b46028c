#!/usr/bin/env python3
"""Benchmark of the numba kernels against the pure-numpy fallbacks.

Runs each hot kernel on payloads sized like a 3d error-stage evaluation and
prints a timing table. The numba path is warmed up first so JIT compilation
does not pollute the numbers.

    python3 benchmarks/bench_kernels.py [--points 2000000] [--repeats 5]
"""

import argparse
import time

import numpy as np

from srdhomog import kernels


def timeit(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=2_000_000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not kernels.NUMBA_ENABLED:
        print("numba backend unavailable (SRDHOMOG_KERNELS=numpy or numba missing);")
        print("timing the numpy path only.")

    rng = np.random.default_rng(0)
    npts = args.points
    rows = []

    # strain evaluation at embedded points (3d, 8-node elements)
    dofs = rng.standard_normal((npts, 8, 3))
    grads = rng.standard_normal((npts, 8, 3))
    t_np, ref = timeit(kernels._strain_at_points_np, dofs, grads, repeats=args.repeats)
    if kernels.NUMBA_ENABLED:
        kernels._strain_at_points_nb(dofs[:10], grads[:10])  # warmup
        t_nb, out = timeit(kernels._strain_at_points_nb, dofs, grads,
                           repeats=args.repeats)
        assert np.allclose(ref, out, rtol=1e-12, atol=1e-12)
    else:
        t_nb = None
    rows.append(("strain_at_points", npts, t_np, t_nb))

    # recovery scatter-add
    nk = npts // 8
    values = rng.standard_normal((npts, 6))
    slots = rng.integers(0, nk, size=npts)
    out_np = np.zeros((nk, 6))
    t_np, _ = timeit(kernels._scatter_add_pairs_np, values, slots, out_np,
                     repeats=1)
    if kernels.NUMBA_ENABLED:
        kernels._scatter_add_pairs_nb(values[:10], slots[:10], np.zeros((nk, 6)))
        out_nb = np.zeros((nk, 6))
        t_nb, _ = timeit(kernels._scatter_add_pairs_nb, values, slots, out_nb,
                         repeats=1)
        assert np.allclose(out_np, out_nb, rtol=1e-12, atol=1e-10)
    else:
        t_nb = None
    rows.append(("scatter_add_pairs", npts, t_np, t_nb))

    # energy quadrature sum
    ne = npts // 8
    sig = rng.standard_normal((ne, 8, 6))
    eps = rng.standard_normal((ne, 8, 6))
    w = rng.random((ne, 8))
    t_np, ref = timeit(kernels._energy_dot_np, sig, eps, w, repeats=args.repeats)
    if kernels.NUMBA_ENABLED:
        kernels._energy_dot_nb(sig[:10], eps[:10], w[:10])
        t_nb, out = timeit(kernels._energy_dot_nb, sig, eps, w,
                           repeats=args.repeats)
        assert abs(ref - out) <= 1e-9 * max(abs(ref), 1.0)
    else:
        t_nb = None
    rows.append(("energy_dot", ne * 8, t_np, t_nb))

    print(f"{'kernel':<20} {'payload':>10} {'numpy (s)':>11} {'numba (s)':>11} "
          f"{'speedup':>8}")
    for name, n, t_np, t_nb in rows:
        if t_nb is None:
            print(f"{name:<20} {n:>10} {t_np:>11.4f} {'-':>11} {'-':>8}")
        else:
            print(f"{name:<20} {n:>10} {t_np:>11.4f} {t_nb:>11.4f} "
                  f"{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
