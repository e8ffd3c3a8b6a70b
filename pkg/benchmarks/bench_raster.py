"""Compositing kernel benchmark: compiled extension vs the numpy fallback.

    python3 benchmarks/bench_raster.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from skysplat.render import raster
from skysplat.scene import Camera, GaussianBatch


def random_scene(n, size, rng, sdim=3):
    R, t = Camera.look_at([0.0, -4.0, 2.0], [0.0, 0.0, 0.0])
    f = 0.8 * size
    cam = Camera(0, f, f, (size - 1) / 2, (size - 1) / 2, R, t, size, size)
    q = rng.normal(size=(n, 4))
    g = GaussianBatch(rng.uniform(-1.5, 1.5, (n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                      rng.uniform(0.02, 0.15, (n, sdim)), rng.uniform(0.2, 0.9, n), rng.uniform(0, 1, (n, 3)))
    return g, cam


def time_backend(name, g, cam, mode, repeat):
    raster.use_backend(name)
    fwd, bwd = [], []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = raster.rasterize(g, cam, mode)
        t1 = time.perf_counter()
        grads = raster.rasterize_backward(out.ctx, {"rgb": np.ones_like(out.rgb), "alpha": np.ones_like(out.alpha)})
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
    return min(fwd), min(bwd), out, grads


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    try:
        raster.use_backend("compiled")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'mode':>4} {'gauss':>6} {'px':>5} | {'py fwd':>8} {'py bwd':>8} | {'cy fwd':>8} {'cy bwd':>8} | "
          f"{'speedup':>7} {'max diff':>9}")
    for mode in ("3d", "2d"):
        for n, size in ((500, 64), (2000, 64), (5000, 128)):
            g, cam = random_scene(n, size, rng, 3 if mode == "3d" else 2)
            pf, pb, po, pg = time_backend("python", g, cam, mode, args.repeat)
            cf, cb, co, cg = time_backend("compiled", g, cam, mode, args.repeat)
            diff = max(np.abs(po.rgb - co.rgb).max(), np.abs(pg.mu - cg.mu).max())
            print(f"{mode:>4} {n:>6} {size:>5} | {pf:8.4f} {pb:8.4f} | {cf:8.4f} {cb:8.4f} | "
                  f"{(pf + pb) / (cf + cb):7.1f} {diff:9.2e}")
    raster.use_backend("compiled")


if __name__ == "__main__":
    main()
