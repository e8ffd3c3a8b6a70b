"""Tile-based differentiable rasterization of projected Gaussians."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContextMismatch, ShapeMismatch
from ..scene import Camera, GaussianBatch, RenderMode
from . import _kernel_py
from .normals import depth_to_normal, depth_to_normal_backward
from .project import SplatBatch, project_backward, project_batch

TILE = 16


def _load_backend():
    if os.environ.get("SKYSPLAT_PURE", "") == "1":
        return _kernel_py, "python"
    try:
        from . import _kernel  # type: ignore[attr-defined]
    except ImportError:
        return _kernel_py, "python"
    return _kernel, "compiled"


kernel, BACKEND = _load_backend()


def use_backend(name: str):
    """Switch the compositing kernel at runtime (``"compiled"`` or ``"python"``)."""
    global kernel, BACKEND
    if name == "python":
        kernel, BACKEND = _kernel_py, "python"
    elif name == "compiled":
        from . import _kernel  # type: ignore[attr-defined]

        kernel, BACKEND = _kernel, "compiled"
    else:
        raise ValueError(f"unknown backend {name!r}")
    return BACKEND


@dataclass
class RasterContext:
    cam: Camera
    mode: RenderMode
    n_gaussians: int
    splats: SplatBatch
    feats: np.ndarray
    tile_ptr: np.ndarray
    tile_ids: np.ndarray
    final_T: np.ndarray
    last: np.ndarray
    acc: np.ndarray
    token: object = field(default_factory=object)


@dataclass
class RenderOutput:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    inv_depth: np.ndarray
    normal: np.ndarray
    radius: np.ndarray      # per input Gaussian, 0 when culled
    visible: np.ndarray     # per input Gaussian
    opacity: np.ndarray     # per input Gaussian
    scales: np.ndarray      # s of the input Gaussians (used by the volume regularizer)
    ctx: RasterContext = None

    @property
    def shape(self):
        return self.alpha.shape


@dataclass
class GaussianGrads:
    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    screen_grad: np.ndarray  # per-Gaussian NDC-space positional gradient norm


def bin_splats(sb: SplatBatch, W: int, H: int, tile: int = TILE):
    """Sorted (tile, depth, index) lists. Returns ``tile_ptr`` and ``tile_ids``."""
    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    if len(sb) == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    x0 = np.clip(sb.bbox[:, 0], 0, W - 1)
    y0 = np.clip(sb.bbox[:, 1], 0, H - 1)
    x1 = np.clip(sb.bbox[:, 2], 0, W - 1)
    y1 = np.clip(sb.bbox[:, 3], 0, H - 1)
    empty = (sb.bbox[:, 2] < 0) | (sb.bbox[:, 0] > W - 1) | (sb.bbox[:, 3] < 0) | (sb.bbox[:, 1] > H - 1)
    tx0 = (x0 // tile).astype(np.int64)
    tx1 = (x1 // tile).astype(np.int64)
    ty0 = (y0 // tile).astype(np.int64)
    ty1 = (y1 // tile).astype(np.int64)
    nx = np.where(empty, 0, tx1 - tx0 + 1)
    ny = np.where(empty, 0, ty1 - ty0 + 1)
    counts = nx * ny
    order = np.lexsort((sb.index, sb.depth))
    rep = np.repeat(order, counts[order])
    local = np.arange(len(rep)) - np.repeat(np.cumsum(counts[order]) - counts[order], counts[order])
    tx = tx0[rep] + local % nx[rep]
    ty = ty0[rep] + local // nx[rep]
    tid = ty * tiles_x + tx
    perm = np.argsort(tid, kind="stable")
    tile_ids = rep[perm].astype(np.int64)
    tile_ptr = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tid, minlength=n_tiles), out=tile_ptr[1:])
    return tile_ptr, tile_ids


def _splat_features(sb: SplatBatch):
    cols = [sb.color, sb.depth[:, None]]
    if sb.mode is RenderMode.DISK2D:
        cols.append(sb.normal)
    return np.ascontiguousarray(np.concatenate(cols, axis=1))


def _finish(acc, final_T, mode, cam):
    alpha = 1.0 - final_T
    rgb = acc[..., :3]
    hit = alpha > 0
    depth = np.zeros_like(alpha)
    depth[hit] = acc[..., 3][hit] / alpha[hit]
    inv_depth = np.zeros_like(alpha)
    pos = depth > 0
    inv_depth[pos] = 1.0 / depth[pos]
    if mode is RenderMode.DISK2D:
        nacc = acc[..., 4:7]
        nn = np.linalg.norm(nacc, axis=-1)
        normal = np.zeros_like(nacc)
        ok = hit & (nn > 0)
        normal[ok] = nacc[ok] / nn[ok][:, None]
    else:
        normal = depth_to_normal(depth, cam)
    return rgb.copy(), alpha, depth, inv_depth, normal


def rasterize(gaussians: GaussianBatch, cam: Camera, mode=RenderMode.ELLIPSOID3D) -> RenderOutput:
    mode = RenderMode.parse(mode)
    sdim = 3 if mode is RenderMode.ELLIPSOID3D else 2
    if len(gaussians) and gaussians.s.shape[1] != sdim:
        raise ShapeMismatch(f"{mode.value} mode needs {sdim} scale columns, got {gaussians.s.shape[1]}")
    W, H = cam.width, cam.height
    sb = project_batch(gaussians, cam, mode)
    tile_ptr, tile_ids = bin_splats(sb, W, H)
    feats = _splat_features(sb)
    code = 0 if mode is RenderMode.ELLIPSOID3D else 1
    mean2d = np.ascontiguousarray(sb.mean2d)
    geom = np.ascontiguousarray(sb.geom)
    opac = np.ascontiguousarray(sb.opacity, dtype=np.float64)
    acc, final_T, last = kernel.forward(code, mean2d, geom, opac, feats, tile_ptr, tile_ids, W, H, TILE)
    rgb, alpha, depth, inv_depth, normal = _finish(acc, final_T, mode, cam)
    n = len(gaussians)
    radius = np.zeros(n)
    visible = np.zeros(n, dtype=bool)
    in_tiles = np.zeros(len(sb), dtype=bool)
    in_tiles[tile_ids] = True
    visible[sb.index[in_tiles]] = True
    radius[sb.index[in_tiles]] = sb.radius[in_tiles]
    ctx = RasterContext(cam, mode, n, sb, feats, tile_ptr, tile_ids, final_T, last, acc)
    return RenderOutput(rgb, alpha, depth, inv_depth, normal, radius, visible, gaussians.sigma.copy(),
                        gaussians.s, ctx)


def _grad_or_zero(grad_out, key, shape):
    g = grad_out.get(key)
    if g is None:
        return np.zeros(shape)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != shape:
        raise ContextMismatch(f"gradient '{key}' has shape {g.shape}, expected {shape}")
    return g


def rasterize_backward(ctx: RasterContext, grad_out: dict, out: RenderOutput = None) -> GaussianGrads:
    """Reverse the composite; ``grad_out`` maps buffer names to dL/dbuffer.

    Recognized keys: rgb, alpha, depth, inv_depth, normal.
    """
    if not isinstance(ctx, RasterContext):
        raise ContextMismatch("backward needs the context saved by rasterize()")
    if out is not None and out.ctx is not ctx:
        raise ContextMismatch("render output does not belong to this context")
    cam, mode = ctx.cam, ctx.mode
    H, W = cam.height, cam.width
    unknown = set(grad_out) - {"rgb", "alpha", "depth", "inv_depth", "normal"}
    if unknown:
        raise ContextMismatch(f"unknown gradient buffers {sorted(unknown)}")
    g_rgb = _grad_or_zero(grad_out, "rgb", (H, W, 3))
    g_alpha = _grad_or_zero(grad_out, "alpha", (H, W)).copy()
    g_depth = _grad_or_zero(grad_out, "depth", (H, W)).copy()
    g_inv = _grad_or_zero(grad_out, "inv_depth", (H, W))
    g_normal = _grad_or_zero(grad_out, "normal", (H, W, 3))

    acc, final_T = ctx.acc, ctx.final_T
    alpha = 1.0 - final_T
    hit = alpha > 0
    depth = np.zeros_like(alpha)
    depth[hit] = acc[..., 3][hit] / alpha[hit]
    pos = depth > 0
    g_depth[pos] -= g_inv[pos] / depth[pos] ** 2
    C = ctx.feats.shape[1]
    g_acc = np.zeros((H, W, C))
    g_acc[..., :3] = g_rgb
    if mode is RenderMode.DISK2D:
        nacc = acc[..., 4:7]
        nn = np.linalg.norm(nacc, axis=-1)
        ok = hit & (nn > 0)
        nu = np.zeros_like(nacc)
        nu[ok] = nacc[ok] / nn[ok][:, None]
        gn = g_normal[ok]
        g_acc[..., 4:7][ok] = (gn - nu[ok] * np.sum(nu[ok] * gn, axis=1, keepdims=True)) / nn[ok][:, None]
    elif np.any(g_normal):
        g_depth += depth_to_normal_backward(depth, cam, g_normal)
    g_acc[..., 3][hit] = g_depth[hit] / alpha[hit]
    g_alpha[hit] -= g_depth[hit] * depth[hit] / alpha[hit]
    # alpha = 1 - T_final = sum_i alpha_i T_i

    sb = ctx.splats
    code = 0 if mode is RenderMode.ELLIPSOID3D else 1
    d_opac, d_feats, d_geom, d_mean, d_shift = kernel.backward(
        code, np.ascontiguousarray(sb.mean2d), np.ascontiguousarray(sb.geom),
        np.ascontiguousarray(sb.opacity, dtype=np.float64), ctx.feats, ctx.tile_ptr, ctx.tile_ids, W, H,
        final_T, ctx.last, np.ascontiguousarray(g_acc), np.ascontiguousarray(g_alpha), TILE,
    )
    d_normal = d_feats[:, 4:7] if mode is RenderMode.DISK2D else np.zeros((len(sb), 3))
    d_mu_v, d_q_v, d_s_v = project_backward(sb, cam, d_mean, d_geom, d_feats[:, 3], d_normal)

    n = ctx.n_gaussians
    sdim = sb.saved["s"].shape[1] if len(sb) else (2 if mode is RenderMode.DISK2D else 3)
    grads = GaussianGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, sdim)), np.zeros(n), np.zeros((n, 3)),
                          np.zeros(n))
    idx = sb.index
    grads.mu[idx] = d_mu_v
    grads.q[idx] = d_q_v
    grads.s[idx] = d_s_v
    grads.sigma[idx] = d_opac
    grads.color[idx] = d_feats[:, :3]
    ndc = d_shift * np.array([0.5 * W, 0.5 * H])
    grads.screen_grad[idx] = np.linalg.norm(ndc, axis=1)
    return grads


def render(gaussians, cam, mode=RenderMode.ELLIPSOID3D):
    """Convenience alias for :func:`rasterize`."""
    return rasterize(gaussians, cam, mode)
