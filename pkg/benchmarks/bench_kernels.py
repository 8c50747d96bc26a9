#!/usr/bin/env python3
"""Compare the compiled and numpy im2col/col2im kernels on decoder-sized workloads.

    python benchmarks/bench_kernels.py [--repeat 20] [--dtype float64]

Prints one line per (kernel, shape) with the median time of each backend and
the speedup, and checks both backends agree bitwise on every workload.
"""

import argparse
import statistics
import sys
import time

import numpy as np

from arnet import kernels

# (n, c, h, w, k, stride, dilation): shapes that occur in a 64x64 / 416x416 forward
WORKLOADS = [
    (2, 64, 16, 16, 3, 1, 1),
    (2, 64, 16, 16, 5, 1, 1),
    (2, 64, 16, 16, 3, 1, 3),
    (2, 128, 16, 16, 3, 1, 1),
    (2, 32, 32, 32, 3, 2, 1),
    (1, 64, 104, 104, 3, 1, 1),
]


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench(repeat: int, dtype) -> bool:
    py, cy = kernels.python_backend, kernels.compiled_backend
    if cy is None:
        print("compiled kernels not built; only the numpy fallback is available", file=sys.stderr)
        return False
    rng = np.random.default_rng(0)
    print(f"{'kernel':7} {'workload':34} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
    agree = True
    for n, c, h, w, k, s, d in WORKLOADS:
        pad = d * (k - 1) // 2
        hp, wp = h + 2 * pad, w + 2 * pad
        oh = (hp - d * (k - 1) - 1) // s + 1
        ow = (wp - d * (k - 1) - 1) // s + 1
        xp = np.ascontiguousarray(rng.standard_normal((n, c, hp, wp)).astype(dtype))
        cols = np.ascontiguousarray(rng.standard_normal((n, c * k * k, oh * ow)).astype(dtype))
        label = f"n{n} c{c} {h}x{w} k{k} s{s} d{d}"
        for name, f_py, f_cy in (
            ("im2col", lambda: py.im2col(xp, k, k, s, d, oh, ow), lambda: cy.im2col(xp, k, k, s, d, oh, ow)),
            ("col2im", lambda: py.col2im(cols, c, hp, wp, k, k, s, d, oh, ow),
             lambda: cy.col2im(cols, c, hp, wp, k, k, s, d, oh, ow)),
        ):
            same = np.array_equal(np.asarray(f_py()), np.asarray(f_cy()))
            agree &= same
            tp, tc = _median_time(f_py, repeat), _median_time(f_cy, repeat)
            flag = "" if same else "  MISMATCH"
            print(f"{name:7} {label:34} {tp * 1e3:9.3f} {tc * 1e3:10.3f} {tp / tc:7.2f}x{flag}")
    return agree


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    args = ap.parse_args(argv)
    ok = bench(args.repeat, np.dtype(args.dtype))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
