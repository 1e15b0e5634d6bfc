"""Compare the compiled and pure-NumPy convolution kernels.

Runs forward and backward grouped convolutions at a few representative
shapes under both backends and reports wall times and speedups. Invoke as

    python3 benchmarks/bench_kernels.py [--repeats N]

The compiled backend warms up (JIT) before timing.
"""

import argparse
import time

import numpy as np

from gamreid.kernels import numpy_backend

try:
    from gamreid.kernels import numba_backend
except ImportError:
    numba_backend = None

SHAPES = (
    # n, c_in, c_out, h, w, k, stride, groups
    (8, 16, 16, 32, 16, 3, 1, 1),
    (8, 32, 32, 16, 8, 3, 1, 4),
    (4, 64, 64, 16, 8, 3, 2, 8),
    (2, 64, 128, 32, 16, 1, 1, 1),
)


def _inputs(rng, n, cin, cout, h, w, k, stride, groups):
    pad = k // 2
    x = rng.normal(size=(n, cin, h, w))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wgt = rng.normal(size=(cout, cin // groups, k, k))
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    dy = rng.normal(size=(n, cout, out_h, out_w))
    return xp, wgt, dy


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(repeats):
    rng = np.random.default_rng(0)
    backends = {"numpy": numpy_backend}
    if numba_backend is not None:
        backends["numba"] = numba_backend
    rows = []
    for shape in SHAPES:
        n, cin, cout, h, w, k, stride, groups = shape
        xp, wgt, dy = _inputs(rng, *shape)
        label = f"n{n} {cin}->{cout} {h}x{w} k{k} s{stride} g{groups}"
        timings = {}
        for name, mod in backends.items():
            mod.conv2d_forward(xp, wgt, stride, groups)  # warm-up / JIT
            mod.conv2d_backward(xp, wgt, dy, stride, groups, True, True)
            timings[name] = (
                _time(lambda m=mod: m.conv2d_forward(xp, wgt, stride, groups),
                      repeats),
                _time(lambda m=mod: m.conv2d_backward(xp, wgt, dy, stride,
                                                      groups, True, True),
                      repeats),
            )
        rows.append((label, timings))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repeats per kernel (best is kept)")
    args = parser.parse_args()

    if numba_backend is None:
        print("compiled backend unavailable; timing pure NumPy only")
    rows = bench(args.repeats)

    header = f"{'shape':30} {'dir':8} {'numba':>11} {'numpy':>11} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, timings in rows:
        for direction, slot in (("forward", 0), ("backward", 1)):
            numpy_ms = timings["numpy"][slot] * 1e3
            if "numba" in timings:
                numba_ms = timings["numba"][slot] * 1e3
                print(f"{label:30} {direction:8} {numba_ms:9.2f}ms "
                      f"{numpy_ms:9.2f}ms {numpy_ms / numba_ms:7.1f}x")
            else:
                print(f"{label:30} {direction:8} {'-':>11} {numpy_ms:9.2f}ms {'-':>8}")


if __name__ == "__main__":
    main()
