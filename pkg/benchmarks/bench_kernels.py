"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--kernels 5000] [--size 128] [--repeat 5]

Both paths run in the same process by flipping the per-module dispatch flag,
which is what ``XRAYSPLAT_DISABLE_JIT=1`` sets at import time.  The first
numba call (compilation, or a cache load) is excluded from the timings.
"""
import argparse
import time

import numpy as np

from xraysplat._accel import HAVE_NUMBA
from xraysplat.geometry import Intrinsics, look_at
from xraysplat.kernels import march, raster, voxel
from xraysplat.phantom import PhantomSpec, generate_phantom, render_drr
from xraysplat.projector import render_backward, render_with_context
from xraysplat.scene import WorldTransform, init_random
from xraysplat.volume_post import voxelize_backward_scene, voxelize_scene_units

MODULES = (raster, voxel, march)


def use_numba(flag):
    for m in MODULES:
        m.USE_NUMBA = flag


def best_of(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(n_kernels, size):
    scene = init_random(n=n_kernels, scale_init=0.03, density_range=(0.01, 0.1), seed=0,
                        world_transform=WorldTransform(64.0))
    K = Intrinsics(2.4 * size, 2.4 * size, size / 2, size / 2, size, size)
    cam = (K, look_at([500.0, 0.0, 50.0], [0.0, 0.0, 0.0]))
    grad_img = np.random.default_rng(1).normal(size=(size, size))
    tv_grid = ((32, 32, 32), 2.0 / 64, np.full(3, -0.5))
    grad_vol = np.random.default_rng(2).normal(size=tv_grid[0])
    vol = generate_phantom(PhantomSpec())

    def raster_fb():
        _, ctx = render_with_context(scene, cam)
        render_backward(scene, ctx, grad_img)

    def voxel_fb():
        _, ctx = voxelize_scene_units(scene, *tv_grid, cutoff=3.0)
        voxelize_backward_scene(scene, ctx, grad_vol)

    return {
        f"render fwd+bwd ({n_kernels} kernels, {size}^2)": raster_fb,
        f"voxelize fwd+bwd ({n_kernels} kernels, 32^3)": voxel_fb,
        f"DRR march (64^3 volume, {size}^2)": lambda: render_drr(vol, cam),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kernels", type=int, default=5000)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rows = []
    for name, fn in cases(args.kernels, args.size).items():
        use_numba(True)
        t_nb = best_of(fn, args.repeat)
        use_numba(False)
        t_np = best_of(fn, args.repeat)
        rows.append((name, t_nb, t_np))
    use_numba(True)

    w = max(len(r[0]) for r in rows)
    print(f"{'case':<{w}}  {'numba [ms]':>11}  {'numpy [ms]':>11}  {'speed-up':>8}")
    for name, a, b in rows:
        print(f"{name:<{w}}  {1e3 * a:11.2f}  {1e3 * b:11.2f}  {b / a:7.1f}x")


if __name__ == "__main__":
    main()
