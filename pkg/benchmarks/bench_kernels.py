"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from midget import kernels


def cases(rng):
    codes = rng.normal(size=(512, 512))
    latents = rng.normal(size=(30 * 64, 512))
    small_codes = rng.normal(size=(64, 32))
    small_latents = rng.normal(size=(8 * 8, 32))
    speed = np.abs(np.sin(np.linspace(0, 60, 240 * 64))) + rng.uniform(0, 1e-3, size=240 * 64)
    beats = np.sort(rng.choice(240 * 64, size=2000, replace=False)).astype(float)
    src = rng.uniform(0, 240 * 64, size=2000)
    return {
        "nearest_code 1920x512 vs 512": lambda b: kernels.nearest_code(latents, codes, b),
        "nearest_code 64x32 vs 64": lambda b: kernels.nearest_code(small_latents, small_codes, b),
        "speed_minima 15360 frames": lambda b: kernels.speed_minima(speed, b),
        "nearest_distance 2000 beats": lambda b: kernels.nearest_distance(src, beats, b),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if kernels.BACKEND != "cython":
        raise SystemExit("compiled extension is not built; reinstall with Cython available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        np.testing.assert_array_equal(fn("python"), fn("cython"))
        times = {}
        for backend in ("python", "cython"):
            timer = timeit.Timer(lambda: fn(backend))
            number, _ = timer.autorange()
            times[backend] = min(timer.repeat(args.repeat, number)) / number * 1e3
        print(f"{name:32s} {times['python']:10.3f} {times['cython']:10.3f} {times['python'] / times['cython']:7.1f}x")


if __name__ == "__main__":
    main()
