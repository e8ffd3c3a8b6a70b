"""Procedural toy city: textured boxes on a finite ground plane, ray-cast analytically.

Twelve aerial and twelve street views with exact depth and a sky mask, so
every pipeline stage can run offline.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..losses import SupervisionBundle
from ..scene import Camera, PointCloud, ViewClass

GROUND_HALF = 4.0
SKY = np.array([0.62, 0.76, 0.95])

# (center x, center y, half x, half y, height, rgb)
BOXES = (
    (-1.8, -1.5, 0.7, 0.9, 1.6, (0.80, 0.45, 0.35)),
    (1.6, -1.2, 0.9, 0.6, 1.1, (0.40, 0.55, 0.80)),
    (-1.2, 1.8, 0.8, 0.7, 2.0, (0.85, 0.80, 0.45)),
    (1.9, 1.9, 0.6, 0.8, 1.4, (0.50, 0.75, 0.50)),
)


def ground_color(p):
    x, y = p[..., 0], p[..., 1]
    r = 0.46 + 0.10 * np.sin(0.9 * x) * np.cos(0.7 * y)
    g = 0.44 + 0.08 * np.cos(0.6 * x + 0.4 * y)
    b = 0.40 + 0.08 * np.sin(0.5 * y - 0.3 * x)
    return np.stack([r, g, b], axis=-1)


def box_color(p, base, face):
    shade = np.array([0.80, 0.88, 1.0])[face]  # side x, side y, top
    u = p[..., 0] + p[..., 1] + p[..., 2]
    mod = 0.9 + 0.1 * np.sin(2.0 * u)
    return np.clip(np.asarray(base) * (shade * mod)[..., None], 0, 1)


def ray_cast(origins, dirs):
    """First hit along rays. Returns (t, color, hit) with t = inf on a miss."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    color = np.tile(SKY, (n, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origins[:, 2] / dirs[:, 2]
    p = origins + t[:, None] * dirs
    ok = (dirs[:, 2] < 0) & (t > 0) & (np.abs(p[:, 0]) <= GROUND_HALF) & (np.abs(p[:, 1]) <= GROUND_HALF)
    best_t[ok] = t[ok]
    color[ok] = ground_color(p[ok])
    for cx, cy, hx, hy, h, base in BOXES:
        lo = np.array([cx - hx, cy - hy, 0.0])
        hi = np.array([cx + hx, cy + hy, h])
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - origins) / dirs
            t1 = (hi - origins) / dirs
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        face = tmin.argmax(axis=1)
        hit = (near <= far) & (near > 0) & (near < best_t)
        if hit.any():
            best_t[hit] = near[hit]
            ph = origins[hit] + near[hit, None] * dirs[hit]
            color[hit] = box_color(ph, base, face[hit])
    return best_t, color, np.isfinite(best_t)


def render_view(cam: Camera, supersample=3):
    """(rgb, depth, mask): rgb box-filtered over a supersample grid, depth and mask at pixel centers."""
    H, W = cam.height, cam.width
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    acc = np.zeros((H, W, 3))
    Rt = cam.R.T
    o = cam.center
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    for dy in offs:
        for dx in offs:
            d = np.stack([(xs + dx - cam.cx) / cam.fx, (ys + dy - cam.cy) / cam.fy, np.ones_like(xs)], -1)
            dw = d.reshape(-1, 3) @ Rt.T
            _, col, _ = ray_cast(np.broadcast_to(o, dw.shape), dw)
            acc += col.reshape(H, W, 3)
    rgb = acc / supersample ** 2
    d = cam.pixel_rays().reshape(-1, 3) @ Rt.T
    t, _, hit = ray_cast(np.broadcast_to(o, d.shape), d)
    depth = np.where(hit, t, 0.0).reshape(H, W)     # rays have unit camera z, so t is camera depth
    mask = (~hit).reshape(H, W).astype(np.float64)
    return rgb, depth, mask


def toy_cameras(size=64, n_aerial=12, n_street=12, fov_deg=60.0):
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    c = (size - 1) / 2.0
    cams = []
    for i in range(n_aerial):
        a = 2 * np.pi * i / n_aerial
        radius = 5.0 if i % 2 == 0 else 4.0
        height = 7.0 if i % 2 == 0 else 8.0
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        R, t = Camera.look_at(eye, [0.0, 0.0, 0.0])
        cams.append(Camera(0, f, f, c, c, R, t, size, size, ViewClass.AERIAL, 0, f"aerial_{i:02d}"))
    for i in range(n_street):
        a = 2 * np.pi * (i + 0.5) / n_street
        eye = np.array([3.2 * np.cos(a), 3.2 * np.sin(a), 0.7])
        target = np.array([0.8 * np.cos(a + 2.4), 0.8 * np.sin(a + 2.4), 0.6])
        R, t = Camera.look_at(eye, target)
        cams.append(Camera(0, f, f, c, c, R, t, size, size, ViewClass.STREET, 0, f"street_{i:02d}"))
    cams.sort(key=lambda cm: cm.name)
    for i, cm in enumerate(cams):
        cm.id = i
    return cams


def surface_points(spacing=0.35, jitter=0.05, rng=None):
    """Samples over the ground (outside boxes) and box sides/tops, with their colors."""
    rng = np.random.default_rng(0) if rng is None else rng
    pts, cols = [], []
    g = np.arange(-GROUND_HALF + spacing / 2, GROUND_HALF, spacing)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    ground = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    ground[:, :2] += rng.uniform(-jitter, jitter, (len(ground), 2))
    inside = np.zeros(len(ground), dtype=bool)
    for cx, cy, hx, hy, _, _ in BOXES:
        inside |= (np.abs(ground[:, 0] - cx) < hx) & (np.abs(ground[:, 1] - cy) < hy)
    ground = ground[~inside]
    pts.append(ground)
    cols.append(ground_color(ground))
    step = spacing * 0.7
    for cx, cy, hx, hy, h, base in BOXES:
        lo = np.array([cx - hx, cy - hy, 0.0])
        hi = np.array([cx + hx, cy + hy, h])
        for axis in range(3):
            for side in ((0, 1) if axis < 2 else (1,)):
                other = [a for a in range(3) if a != axis]
                u = np.arange(lo[other[0]] + step / 2, hi[other[0]], step)
                v = np.arange(lo[other[1]] + step / 2, hi[other[1]], step)
                uu, vv = np.meshgrid(u, v, indexing="ij")
                p = np.zeros((uu.size, 3))
                p[:, other[0]] = uu.ravel()
                p[:, other[1]] = vv.ravel()
                p[:, axis] = hi[axis] if side else lo[axis]
                pts.append(p)
                cols.append(box_color(p, base, np.full(len(p), axis)))
    return PointCloud(np.concatenate(pts), np.concatenate(cols))


@dataclass
class ToyScene:
    cameras: list
    points: PointCloud
    supervision: dict
    depths: dict

    def split(self, every=32):
        test = set(range(0, len(self.cameras), every))
        return [c for c in self.cameras if c.id not in test], [c for c in self.cameras if c.id in test]


def make_toy_scene(size=64, seed=0, n_aerial=12, n_street=12, holdout_every=32) -> ToyScene:
    """In-memory toy scene. Held-out views get appearance id -1 (mean embedding)."""
    rng = np.random.default_rng(seed)
    cams = toy_cameras(size, n_aerial, n_street)
    app = 0
    for c in cams:
        if c.id % holdout_every == 0:
            c.appearance_id = -1
        else:
            c.appearance_id, app = app, app + 1
    sup, depths = {}, {}
    for c in cams:
        rgb, depth, mask = render_view(c)
        inv = np.where(depth > 0, 1.0 / np.maximum(depth, 1e-12), 0.0)
        sup[c.id] = SupervisionBundle(rgb, inv, mask)
        depths[c.id] = depth
    return ToyScene(cams, surface_points(rng=rng), sup, depths)


TOY_CONFIG = """\
# Desk-scale settings for the bundled toy scene.
mode = "3d"
seed = 0
base_voxel = 0.35

[desk]
scale = 0.01
"""


def write_toy_dataset(out_dir, size=64, seed=0):
    """Write images, depth (PFM), masks, points and a JSON manifest; returns the manifest path."""
    from .dataset import save_manifest
    from .images import write_image, write_mask, write_pfm
    from .ply import write_points_ply

    scene = make_toy_scene(size, seed)
    for sub in ("images", "depth", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for c in scene.cameras:
        sup = scene.supervision[c.id]
        c.image_path = os.path.join(out_dir, "images", c.name + ".png")
        c.depth_path = os.path.join(out_dir, "depth", c.name + ".pfm")
        c.mask_path = os.path.join(out_dir, "masks", c.name + ".png")
        write_image(c.image_path, sup.gt_rgb)
        write_pfm(c.depth_path, scene.depths[c.id])
        write_mask(c.mask_path, sup.mask)
    pts = os.path.join(out_dir, "points.ply")
    write_points_ply(pts, scene.points)
    with open(os.path.join(out_dir, "toy.toml"), "w") as fh:
        fh.write(TOY_CONFIG)
    return save_manifest(os.path.join(out_dir, "transforms.json"), scene.cameras, pts)
