#!/usr/bin/env python3
"""Time the jit kernels against their pure-numpy twins.

Both backends are imported directly, so SSTAG_KERNELS has no effect here.
Each timing is the best of --repeats runs after an untimed warmup (the
warmup also pays the one-off numba compile). Outputs are cross-checked
before timing; a disagreement aborts the benchmark.

Usage: python bench/bench_kernels.py [--nodes N ...] [--dim D] [--repeats R]
"""

import argparse
import sys
import time

import numpy as np

from sstag.kernels import pure

try:
    from sstag.kernels import jit
except ImportError:
    jit = None


def random_walk_csr(n, avg_degree, rng):
    """Self-looped CSR like WalkMatrix builds: sorted targets, float degrees."""
    m = n * avg_degree
    src = rng.integers(0, n, m)
    dst = rng.integers(0, n, m)
    keep = src != dst
    pairs = np.stack([np.concatenate([src[keep], dst[keep], np.arange(n)]),
                      np.concatenate([dst[keep], src[keep], np.arange(n)])], axis=1)
    pairs = np.unique(pairs, axis=0)  # dedups and sorts (src, dst)
    counts = np.bincount(pairs[:, 0], minlength=n)
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, pairs[:, 1].astype(np.int64), counts.astype(np.float64)


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def check_close(a, b, what, tol):
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    if err > tol:
        sys.exit(f"backend disagreement on {what}: max abs diff {err:.3e}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, nargs="+", default=[2_000, 20_000, 100_000])
    ap.add_argument("--avg-degree", type=int, default=8)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if jit is None:
        print("numba backend unavailable; timing the numpy backend only\n")
    backends = [("numpy", pure)] + ([("numba", jit)] if jit else [])

    rows = []
    for n in args.nodes:
        rng = np.random.default_rng(args.seed)
        offsets, targets, degrees = random_walk_csr(n, args.avg_degree, rng)
        dense = rng.standard_normal((n, args.dim))
        values = rng.uniform(0.1, 1.0, targets.shape[0])

        epsilon = 1e-7
        workloads = {
            # both backends stop anywhere inside the eps*degree residual band,
            # so their masses only agree to that order
            f"push_ppr        n={n:>7}": (
                lambda impl: impl.push_ppr(offsets, targets, degrees, 0, 0.15, epsilon),
                20 * epsilon * float(degrees.max()),
            ),
            f"csr_dense_matmul n={n:>7} d={args.dim}": (
                lambda impl: impl.csr_dense_matmul(offsets, targets, values, dense),
                1e-9,
            ),
        }
        for label, (call, tol) in workloads.items():
            outs = {name: call(impl) for name, impl in backends}  # warmup + compile
            if jit is not None:
                check_close(outs["numpy"], outs["numba"], label, tol)
            timing = {name: best_of(lambda: call(impl), args.repeats)
                      for name, impl in backends}
            rows.append((label, timing))

    name_w = max(len(r[0]) for r in rows)
    header = f"{'workload':<{name_w}}  " + "".join(f"{name:>12}" for name, _ in backends)
    if jit is not None:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label, timing in rows:
        line = f"{label:<{name_w}}  " + "".join(
            f"{timing[name] * 1e3:>10.2f}ms" for name, _ in backends
        )
        if jit is not None:
            line += f"{timing['numpy'] / timing['numba']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
