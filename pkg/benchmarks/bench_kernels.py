"""Conv kernel backend benchmark: numba jitted loops vs numpy tensordot.

Imports both implementations directly (bypassing the AVALIGN_KERNELS
dispatcher) and times the three entry points on the conv shapes that
dominate training. Numba JIT compilation is excluded from the timed
region via a warmup pass and reported once on its own line.

Run:  python benchmarks/bench_kernels.py [--repeats N] [--dtype f32|f64]
"""

import argparse
import time

import numpy as np

from avalign.nn import kernels_numpy

try:
    from avalign.nn import kernels_numba
except ImportError:
    kernels_numba = None

# (label, x shape, w shape, stride): the blocks training actually spends
# its time in, at the stage-1 batch size. Padding is 1 everywhere.
SHAPES = [
    ("audio-b1", (16, 1, 64, 128), (16, 1, 3, 3), 1),
    ("audio-b2", (16, 16, 64, 128), (32, 16, 3, 3), 2),
    ("audio-b3", (16, 32, 32, 64), (64, 32, 3, 3), 2),
    ("visual-stem", (16, 3, 64, 64), (16, 3, 3, 3), 1),
    ("visual-down1", (16, 16, 64, 64), (32, 16, 3, 3), 2),
    ("visual-res2", (16, 64, 16, 16), (64, 64, 3, 3), 1),
    ("unet-enc1", (2, 1, 128, 128), (8, 1, 3, 3), 1),
    ("unet-enc3", (2, 16, 32, 32), (32, 16, 3, 3), 1),
]


def _median_time(fn, repeats):
    best = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    return float(np.median(best))


def bench_case(impl, x, w, gy, stride, repeats):
    s = (stride, stride)
    H, W = x.shape[2], x.shape[3]
    kh, kw = w.shape[2], w.shape[3]
    fwd = _median_time(lambda: impl.conv2d_forward(x, w, *s, 1, 1, 1, 1), repeats)
    bwi = _median_time(lambda: impl.conv2d_backward_input(gy, w, H, W, *s, 1, 1, 1, 1), repeats)
    bww = _median_time(lambda: impl.conv2d_backward_weight(gy, x, kh, kw, *s, 1, 1, 1, 1), repeats)
    return fwd, bwi, bww


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    args = ap.parse_args()
    dtype = np.float32 if args.dtype == "f32" else np.float64

    if kernels_numba is None:
        print("numba backend not importable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    cases = []
    for label, xs, ws, stride in SHAPES:
        x = rng.standard_normal(xs).astype(dtype)
        w = rng.standard_normal(ws).astype(dtype)
        y = kernels_numpy.conv2d_forward(x, w, stride, stride, 1, 1, 1, 1)
        gy = rng.standard_normal(y.shape).astype(dtype)
        cases.append((label, x, w, gy, stride))

    # warmup: first numba call per entry point pays the JIT compile
    t0 = time.perf_counter()
    _, x, w, gy, stride = cases[0]
    bench_case(kernels_numba, x, w, gy, stride, 1)
    print(f"numba JIT compile + first call: {time.perf_counter() - t0:.2f}s "
          f"(excluded from rows below)")

    hdr = f"{'case':14s} {'op':8s} {'numpy ms':>9s} {'numba ms':>9s} {'numba/numpy':>12s}"
    print(hdr)
    print("-" * len(hdr))
    wins = {"numpy": 0, "numba": 0}
    for label, x, w, gy, stride in cases:
        np_t = bench_case(kernels_numpy, x, w, gy, stride, args.repeats)
        nb_t = bench_case(kernels_numba, x, w, gy, stride, args.repeats)
        for op, a, b in zip(("forward", "bwd-in", "bwd-wgt"), np_t, nb_t):
            wins["numba" if b < a else "numpy"] += 1
            print(f"{label:14s} {op:8s} {a * 1e3:9.3f} {b * 1e3:9.3f} {b / a:12.2f}")

    total = wins["numpy"] + wins["numba"]
    faster = max(wins, key=wins.get)
    print(f"\n{faster} faster on {wins[faster]}/{total} (case, op) pairs at dtype "
          f"{args.dtype}. Ratios above 1.0 mean numba is slower.")


if __name__ == "__main__":
    main()
