"""Time the numba and pure-numpy synthetic-video kernels side by side.

    python benchmarks/bench_kernels.py --frames 64 --size 64 --repeat 5
"""
import argparse
import time

import numpy as np

from latentvid import kernels
from latentvid._accel import JIT_ENABLED


def _inputs(rng, shapes, frames, size):
    centers = rng.uniform(0, size - 1, (shapes, frames, 2))
    radii = rng.uniform(0.08, 0.18, shapes) * size
    kinds = rng.integers(0, 3, shapes).astype(np.int64)
    colors = rng.uniform(-1, 1, (shapes, 3))
    return centers, radii, kinds, colors, np.full(3, -1.0), size, size


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def run(frames=64, size=64, shapes=4, repeat=5, seed=0):
    rng = np.random.default_rng(seed)
    raster = _inputs(rng, shapes, frames, size)
    bounce = (3.0, 1.7, 2.0, size - 3.0, frames * 16)
    rows = []
    for name, loop, vec, args in (("rasterize", kernels._rasterize_loop, kernels._rasterize_numpy, raster),
                                  ("bounce", kernels._bounce_loop, kernels._bounce_numpy, bounce)):
        out_a, out_b = loop(*args), vec(*args)
        for a, b in zip(out_a if isinstance(out_a, tuple) else (out_a,),
                        out_b if isinstance(out_b, tuple) else (out_b,)):
            np.testing.assert_allclose(a, b, atol=1e-9)
        t_jit = best_of(loop, args, repeat)
        t_np = best_of(vec, args, repeat)
        rows.append((name, t_jit, t_np))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--shapes", type=int, default=4)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    label = "numba" if JIT_ENABLED else "loop (jit disabled)"
    print(f"{'kernel':<10} {label:>20} {'numpy':>12} {'ratio':>8}")
    for name, t_jit, t_np in run(args.frames, args.size, args.shapes, args.repeat):
        print(f"{name:<10} {t_jit * 1e3:>18.3f}ms {t_np * 1e3:>10.3f}ms {t_np / t_jit:>8.2f}")


if __name__ == "__main__":
    main()
