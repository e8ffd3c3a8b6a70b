"""TSDF fusion of rendered depth maps and marching-cubes surface extraction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from skimage import measure

from .errors import EmptyVolume

BOUNDS_PADDING = 0.05
TRUNCATION_VOXELS = 4.0


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    sdf: np.ndarray           # in units of truncation, [-1, 1]
    weight: np.ndarray
    truncation: float

    def voxel_centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.voxel_size

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.asarray(self.dims) - 1) * self.voxel_size


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray

    def __len__(self):
        return len(self.faces)


def depth_bounds(views, padding=BOUNDS_PADDING, aerial_only=True):
    """Axis-aligned box around back-projected depth (aerial views unless none are tagged)."""
    pts = []
    use = [(d, c) for d, c in views if c.is_aerial] if aerial_only else list(views)
    if not use:
        use = list(views)
    for depth, cam in use:
        ys, xs = np.nonzero(depth > 0)
        d = depth[ys, xs]
        pc = np.stack([(xs - cam.cx) / cam.fx * d, (ys - cam.cy) / cam.fy * d, d], axis=1)
        pts.append((pc - cam.t) @ cam.R)
    if not pts or not sum(len(p) for p in pts):
        raise EmptyVolume("no valid depth to bound the volume")
    pts = np.concatenate(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = padding * (hi - lo).max()
    return lo - pad, hi + pad


def make_volume(lo, hi, resolution=128, truncation=None) -> TsdfVolume:
    """``resolution`` voxels along the longest side of the box."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    voxel = float((hi - lo).max() / (resolution - 1))
    dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel)) + 1 for i in range(3))
    trunc = TRUNCATION_VOXELS * voxel if truncation is None else truncation
    return TsdfVolume(lo, voxel, dims, np.ones(dims), np.zeros(dims), trunc)


def reliable_depth(depth, jump):
    """Zero out pixels next to a depth discontinuity larger than ``jump`` (or next to a miss)."""
    d = np.asarray(depth, dtype=np.float64)
    p = np.pad(d, 1, mode="edge")
    H, W = d.shape
    lo = np.full_like(d, np.inf)
    hi = np.full_like(d, -np.inf)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            nb = p[dy:dy + H, dx:dx + W]
            lo = np.minimum(lo, nb)
            hi = np.maximum(hi, nb)
    bad = (hi - lo > jump) | (lo <= 0)
    return np.where(bad, 0.0, d)


def fuse(views, volume: Optional[TsdfVolume] = None, resolution=128, bounds=None) -> TsdfVolume:
    """Projective TSDF integration of ``views`` = [(depth (H, W), camera), ...].

    The signed distance is taken along the camera axis (pixel depth minus voxel
    depth), truncated, and averaged with weight 1 per observation. Voxels more
    than one truncation behind the surface are left untouched, and pixels on
    depth discontinuities are not integrated.
    """
    views = list(views)
    if not views:
        raise EmptyVolume("no depth maps to fuse")
    if volume is None:
        lo, hi = bounds if bounds is not None else depth_bounds(views)
        volume = make_volume(lo, hi, resolution)
    centers = volume.voxel_centers()
    acc = (volume.sdf * volume.weight).reshape(-1)
    w = volume.weight.reshape(-1).copy()
    for depth, cam in views:
        depth = reliable_depth(depth, volume.truncation)
        pc = centers @ cam.R.T + cam.t
        z = pc[:, 2]
        front = z > 1e-9
        u = np.full(len(z), -1, dtype=np.int64)
        v = np.full(len(z), -1, dtype=np.int64)
        u[front] = np.round(cam.fx * pc[front, 0] / z[front] + cam.cx).astype(np.int64)
        v[front] = np.round(cam.fy * pc[front, 1] / z[front] + cam.cy).astype(np.int64)
        ok = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        d = np.zeros(len(z))
        d[ok] = depth[v[ok], u[ok]]
        ok &= d > 0
        sdf = d - z
        ok &= sdf >= -volume.truncation
        acc[ok] += np.minimum(1.0, sdf[ok] / volume.truncation)
        w[ok] += 1.0
    if not np.any(w > 0):
        raise EmptyVolume("no voxel received an observation")
    sdf = np.ones_like(acc)
    pos = w > 0
    sdf[pos] = acc[pos] / w[pos]
    volume.sdf = sdf.reshape(volume.dims)
    volume.weight = w.reshape(volume.dims)
    return volume


def observed_cells(weight) -> np.ndarray:
    """Cells (dims - 1) whose 8 corners all carry weight."""
    o = weight > 0
    c = o[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c &= o[dx:o.shape[0] - 1 + dx, dy:o.shape[1] - 1 + dy, dz:o.shape[2] - 1 + dz]
    return c


def marching_cubes(volume: TsdfVolume) -> Mesh:
    """Iso-level 0 surface over fully observed cells; normals point toward free space."""
    sdf = volume.sdf
    if min(volume.dims) < 2 or not (np.any(sdf > 0) and np.any(sdf < 0)):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    cells = observed_cells(volume.weight)
    # skimage gates cube (i, j, k) on mask[i + 1, j + 1, k + 1]
    mask = np.zeros(volume.dims, dtype=bool)
    mask[1:, 1:, 1:] = cells
    if not mask.any():
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    try:
        verts, faces, normals, _ = measure.marching_cubes(sdf, level=0.0, spacing=(volume.voxel_size,) * 3,
                                                          mask=mask)
    except (ValueError, RuntimeError):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    # skimage normals follow the negative gradient; flip them to point along +sdf
    return Mesh(verts + volume.origin, faces.astype(np.int64), -normals)


def edge_valence(faces) -> np.ndarray:
    """Number of triangles sharing each undirected edge."""
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def render_depths(field_, bank, cameras, mode="2d"):
    """Expected-depth maps of a trained model for fusion."""
    from .decoder import decode, select_anchors
    from .render import rasterize

    out = []
    for cam in cameras:
        idx = select_anchors(field_, cam, field_.lod.K)
        g = decode(field_, idx, bank, cam, mode=mode, return_context=False)
        r = rasterize(g, cam, mode)
        depth = np.where(r.alpha > 0.5, r.depth, 0.0)
        out.append((depth, cam))
    return out


def extract_mesh(field_, bank, cameras, resolution=128, mode="2d") -> Mesh:
    return marching_cubes(fuse(render_depths(field_, bank, cameras, mode), resolution=resolution))
