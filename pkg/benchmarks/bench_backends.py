"""Timing comparison between the pure numpy backend and the compiled core.

Runs the three hot kernels (network forward pass with derivative tracking,
reverse-mode accumulation, trilinear volume sampling) on both backends at a
small and a large problem size, then prints a table with per-call times and
the speedup of the compiled core over numpy.

Usage:
    python3 benchmarks/bench_backends.py [--repeats N] [--order {0,1,2}]
"""

import argparse
import time

import numpy as np

from ccreg import backend


def make_net(rng, hidden_layers, width):
    sizes = [3] + [width] * hidden_layers + [3]
    ws = [
        rng.normal(size=(sizes[i + 1], sizes[i])) / np.sqrt(sizes[i])
        for i in range(len(sizes) - 1)
    ]
    bs = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
    return ws, bs


def time_call(fn, repeats):
    fn()  # warm up allocators and caches
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def bench_siren(impl, ws, bs, x, order, repeats):
    rng = np.random.default_rng(7)
    n = x.shape[0]
    fwd_ms = time_call(lambda: impl.siren_forward(ws, bs, 30.0, x, order), repeats)
    cache = impl.siren_forward(ws, bs, 30.0, x, order)[3]
    ubar = rng.normal(size=(n, 3))
    dubar = rng.normal(size=(n, 3, 3)) if order >= 1 else None
    d2ubar = rng.normal(size=(n, 3, 6)) if order >= 2 else None
    bwd_ms = time_call(lambda: impl.siren_backward(cache, ubar, dubar, d2ubar), repeats)
    return fwd_ms, bwd_ms


def bench_trilinear(impl, repeats):
    rng = np.random.default_rng(11)
    vol = rng.normal(size=(96, 96, 96))
    pts = rng.uniform(-2.0, 97.0, size=(20000, 3))
    return time_call(lambda: impl.trilinear(vol, pts), repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timed repetitions per kernel; best of N is reported")
    ap.add_argument("--order", type=int, default=2, choices=(0, 1, 2),
                    help="derivative order for the network kernels")
    args = ap.parse_args()

    impls = {"python": backend.numpy_impl}
    if "cython" in backend.available_backends():
        impls["cython"] = backend._IMPLS["cython"]
    else:
        print("compiled core not importable; timing numpy only")

    rng = np.random.default_rng(0)
    cases = [
        ("3x64 net, 800 pts", 3, 64, 800),
        ("3x256 net, 10000 pts", 3, 256, 10000),
    ]

    rows = []
    for label, layers, width, n in cases:
        ws, bs = make_net(rng, layers, width)
        x = rng.uniform(-1.0, 1.0, size=(n, 3))
        per_impl = {}
        for name, impl in impls.items():
            per_impl[name] = bench_siren(impl, ws, bs, x, args.order, args.repeats)
        rows.append((label + " forward", {k: v[0] for k, v in per_impl.items()}))
        rows.append((label + " backward", {k: v[1] for k, v in per_impl.items()}))

    tri = {name: bench_trilinear(impl, args.repeats) for name, impl in impls.items()}
    rows.append(("trilinear 96^3, 20000 pts", tri))

    have_cy = "cython" in impls
    header = f"{'kernel':<28} {'python ms':>10}"
    if have_cy:
        header += f" {'cython ms':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, times in rows:
        line = f"{label:<28} {times['python']:>10.2f}"
        if have_cy:
            ratio = times["python"] / times["cython"]
            line += f" {times['cython']:>10.2f} {ratio:>7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
