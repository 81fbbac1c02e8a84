"""Benchmark the compiled kernels against the pure-numpy fallback.

Runs both implementations in one process (the compiled path via the public
API, the fallback via its module-private entry points) and reports best-of-N
wall times. With SKETCHFORGE_NO_NUMBA=1 both columns measure the fallback.
"""

import argparse
import time

import numpy as np

from sketchforge import kernels


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=1024, help="square raster side")
    parser.add_argument("--radius", type=int, default=1, help="morphology radius")
    parser.add_argument("--sigma", type=float, default=1.6, help="blur sigma")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    gray = rng.integers(0, 256, size=(args.size, args.size)).astype(np.uint8)
    field = rng.random((args.size, args.size), dtype=np.float32)

    kernels.warmup()

    rows = [
        (
            f"dilate r={args.radius}",
            lambda: kernels.dilate(gray, args.radius),
            None,
        ),
        (
            f"morph_gradient r={args.radius}",
            lambda: kernels.morph_gradient(gray, args.radius),
            None,
        ),
        (
            f"gaussian_blur s={args.sigma}",
            lambda: kernels.gaussian_blur(field, args.sigma),
            lambda: kernels._gaussian_blur_np(field, args.sigma),
        ),
    ]

    active = "numba" if kernels.HAVE_NUMBA else "numpy (fallback forced)"
    print(f"raster {args.size}x{args.size}, active path: {active}")
    print(f"{'kernel':<24} {'active (ms)':>12} {'numpy (ms)':>12} {'speedup':>8}")
    for name, fast, slow in rows:
        t_fast = best_of(fast, args.repeats) * 1e3
        if slow is None:
            print(f"{name:<24} {t_fast:>12.2f} {'n/a':>12} {'n/a':>8}")
            continue
        t_slow = best_of(slow, args.repeats) * 1e3
        print(f"{name:<24} {t_fast:>12.2f} {t_slow:>12.2f} {t_slow / t_fast:>7.1f}x")


if __name__ == "__main__":
    main()
