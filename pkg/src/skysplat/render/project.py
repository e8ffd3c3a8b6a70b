"""Per-Gaussian projection to screen space, with its backward pass.

Ellipsoid mode uses the EWA local-affine approximation. Disk mode maps the
disk plane to the image through an exact homography ``M = K [s_u t_u, s_v t_v, p]``
and keeps ``M^-1`` so the rasterizer can intersect each pixel ray with the disk.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import NonFiniteInput
from ..geometry import normalize_vjp, quat_normalize, quat_to_rotmat, rotmat_vjp
from ..scene import Camera, GaussianBatch, RenderMode

NEAR_PLANE = 0.2
DILATION = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
# 2D screen-space filter (disk mode), matching the ray-splat rasterizer family
FILTER_INV_SQ = 2.0
# the EWA Jacobian is evaluated no further off-axis than this multiple of the half field of view
GUARD_BAND = 1.3


class _Culled:
    def __repr__(self):
        return "Culled"


Culled = _Culled()


@dataclass
class Splat2D:
    mean2d: np.ndarray
    conic: Optional[np.ndarray]
    depth: float
    normal_cam: Optional[np.ndarray]
    radius: float
    gaussian_index: int
    minv: Optional[np.ndarray] = None


@dataclass
class SplatBatch:
    mode: RenderMode
    index: np.ndarray        # visible Gaussian indices into the input batch
    mean2d: np.ndarray       # (P, 2)
    geom: np.ndarray         # (P, 3) conic (a, b, c) or (P, 9) inverse homography, row-major
    depth: np.ndarray        # (P,)
    normal: np.ndarray       # (P, 3) camera-space disk normal; zeros in ellipsoid mode
    radius: np.ndarray       # (P,) 3-sigma radius in pixels
    opacity: np.ndarray
    color: np.ndarray
    bbox: np.ndarray         # (P, 4) x0, y0, x1, y1 inclusive pixel range that can reach ALPHA_MIN
    saved: dict

    def __len__(self):
        return len(self.index)


def _check_finite(g: GaussianBatch):
    for name in ("mu", "q", "s", "sigma", "color"):
        if not np.all(np.isfinite(getattr(g, name))):
            raise NonFiniteInput(f"non-finite Gaussian attribute '{name}'")


def _rho_max(opacity):
    with np.errstate(divide="ignore"):
        return 2.0 * np.log(np.maximum(255.0 * np.minimum(opacity, ALPHA_MAX), 1e-300))


def _guard_band(cam, u, v):
    """Clamp normalized image coordinates so near, far off-axis splats keep a bounded footprint."""
    lx = GUARD_BAND * 0.5 * cam.width / cam.fx
    ly = GUARD_BAND * 0.5 * cam.height / cam.fy
    return np.clip(u, -lx, lx), np.clip(v, -ly, ly)


def _ellipse_axis_bounds(center, half, W, H):
    x0 = np.ceil(center[:, 0] - half[:, 0]) - 1
    x1 = np.floor(center[:, 0] + half[:, 0]) + 1
    y0 = np.ceil(center[:, 1] - half[:, 1]) - 1
    y1 = np.floor(center[:, 1] + half[:, 1]) + 1
    return np.stack([x0, y0, x1, y1], axis=1)


def _misses_image(center, half, W, H):
    return (
        (center[:, 0] + half[:, 0] < -0.5)
        | (center[:, 0] - half[:, 0] > W - 0.5)
        | (center[:, 1] + half[:, 1] < -0.5)
        | (center[:, 1] - half[:, 1] > H - 0.5)
    )


def project_batch(g: GaussianBatch, cam: Camera, mode) -> SplatBatch:
    mode = RenderMode.parse(mode)
    _check_finite(g)
    if mode is RenderMode.ELLIPSOID3D:
        return _project_ellipsoid(g, cam)
    return _project_disk(g, cam)


def _project_ellipsoid(g, cam):
    W, H = cam.width, cam.height
    n = len(g)
    qn, qnorm = quat_normalize(g.q)
    Rq = quat_to_rotmat(qn)
    pc = g.mu @ cam.R.T + cam.t
    x, y, z = pc[:, 0], pc[:, 1], np.where(pc[:, 2] > NEAR_PLANE, pc[:, 2], 1.0)
    Mq = Rq * g.s[:, None, :]
    Sw = Mq @ np.transpose(Mq, (0, 2, 1))
    Sc = cam.R @ Sw @ cam.R.T
    tx, ty = _guard_band(cam, x / z, y / z)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * tx / z
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * ty / z
    cov = J @ Sc @ np.transpose(J, (0, 2, 1))
    a = cov[:, 0, 0] + DILATION
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + DILATION
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam)
    # 3-sigma extent per axis of the ellipse
    half3 = 3.0 * np.sqrt(np.stack([a, c], axis=1))
    culled = (pc[:, 2] <= NEAR_PLANE) | (det <= 0) | _misses_image(mean2d, half3, W, H)
    rmax = _rho_max(g.sigma)
    culled |= rmax <= 0
    half = np.sqrt(np.maximum(rmax, 0.0)[:, None] * np.stack([a, c], axis=1))
    keep = np.nonzero(~culled)[0]
    saved = dict(qn=qn[keep], qnorm=qnorm[keep], Rq=Rq[keep], pc=pc[keep], Sc=Sc[keep], J=J[keep],
                 cov=np.stack([a, b, c], axis=1)[keep], s=g.s[keep])
    return SplatBatch(
        RenderMode.ELLIPSOID3D, keep, mean2d[keep], conic[keep], pc[keep, 2], np.zeros((len(keep), 3)),
        radius[keep], g.sigma[keep], g.color[keep], _ellipse_axis_bounds(mean2d[keep], half[keep], W, H), saved,
    )


def _dual_conic_bounds(M, r2):
    """Axis-aligned bounds of the image of the circle u^2+v^2=r2 under homography M.

    Returns (x0, x1, y0, y1, ok); ``ok`` is False where the circle is not
    entirely in front of the camera (the image is unbounded).
    """
    d = np.array([1.0, 1.0, 0.0])
    Cs = (M * d[None, None, :]) @ np.transpose(M, (0, 2, 1))
    Cs = Cs - np.einsum("pi,pj->pij", M[:, :, 2], M[:, :, 2]) / r2[:, None, None]
    c22 = Cs[:, 2, 2]
    ok = c22 < 0
    safe = np.where(ok, c22, -1.0)
    def axis(i):
        disc = np.maximum(Cs[:, i, 2] ** 2 - Cs[:, i, i] * safe, 0.0)
        r1 = (Cs[:, i, 2] + np.sqrt(disc)) / safe
        r2_ = (Cs[:, i, 2] - np.sqrt(disc)) / safe
        return np.minimum(r1, r2_), np.maximum(r1, r2_)
    x0, x1 = axis(0)
    y0, y1 = axis(1)
    return x0, x1, y0, y1, ok


def _project_disk(g, cam):
    W, H = cam.width, cam.height
    qn, qnorm = quat_normalize(g.q)
    Rq = quat_to_rotmat(qn)
    Rc = cam.R @ Rq
    pc = g.mu @ cam.R.T + cam.t
    su, sv = g.s[:, 0], g.s[:, 1]
    Hm = np.stack([Rc[:, :, 0] * su[:, None], Rc[:, :, 1] * sv[:, None], pc], axis=2)
    M = cam.K @ Hm
    det = np.linalg.det(M)
    scale = np.abs(pc[:, 2]) * su * sv * cam.fx * cam.fy + 1e-300
    singular = np.abs(det) < 1e-10 * scale
    Msafe = np.where(singular[:, None, None], np.eye(3), M)
    Minv = np.linalg.inv(Msafe)
    nc = Rc[:, :, 2]
    sgn = np.where(np.sum(nc * pc, axis=1) > 0, -1.0, 1.0)
    normal = nc * sgn[:, None]
    z = np.where(pc[:, 2] > NEAR_PLANE, pc[:, 2], 1.0)
    mean2d = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)

    x0, x1, y0, y1, ok3 = _dual_conic_bounds(Msafe, np.full(len(g), 9.0))
    half3 = np.stack([np.maximum(x1 - mean2d[:, 0], mean2d[:, 0] - x0),
                      np.maximum(y1 - mean2d[:, 1], mean2d[:, 1] - y0)], axis=1)
    half3 = np.where(ok3[:, None], half3, np.inf)
    radius = np.where(ok3, np.max(half3, axis=1), max(W, H))
    culled = (pc[:, 2] <= NEAR_PLANE) | singular | _misses_image(mean2d, np.where(np.isfinite(half3), half3, 1e9), W, H)

    rmax = _rho_max(g.sigma)
    culled |= rmax <= 0
    rsafe = np.maximum(rmax, 1e-12)
    bx0, bx1, by0, by1, ok = _dual_conic_bounds(Msafe, rsafe)
    filt = np.sqrt(rsafe / FILTER_INV_SQ)
    bx0 = np.where(ok, np.minimum(bx0, mean2d[:, 0] - filt), -1.0)
    bx1 = np.where(ok, np.maximum(bx1, mean2d[:, 0] + filt), W)
    by0 = np.where(ok, np.minimum(by0, mean2d[:, 1] - filt), -1.0)
    by1 = np.where(ok, np.maximum(by1, mean2d[:, 1] + filt), H)
    bbox = np.stack([np.ceil(bx0) - 1, np.ceil(by0) - 1, np.floor(bx1) + 1, np.floor(by1) + 1], axis=1)

    keep = np.nonzero(~culled)[0]
    saved = dict(qn=qn[keep], qnorm=qnorm[keep], Rq=Rq[keep], Rc=Rc[keep], pc=pc[keep], Minv=Minv[keep],
                 sgn=sgn[keep], s=g.s[keep])
    return SplatBatch(
        RenderMode.DISK2D, keep, mean2d[keep], Minv[keep].reshape(-1, 9), pc[keep, 2], normal[keep],
        radius[keep], g.sigma[keep], g.color[keep], bbox[keep], saved,
    )


def project(g: GaussianBatch, cam: Camera, mode, index: int = 0):
    """Project a single Gaussian; returns :class:`Splat2D` or ``Culled``."""
    one = g.take(np.array([index]))
    sb = project_batch(one, cam, mode)
    if len(sb) == 0:
        return Culled
    disk = sb.mode is RenderMode.DISK2D
    conic = None
    if not disk:
        a, b, c = sb.geom[0]
        conic = np.array([[a, b], [b, c]])
    return Splat2D(
        mean2d=sb.mean2d[0], conic=conic, depth=float(sb.depth[0]),
        normal_cam=sb.normal[0] if disk else None, radius=float(sb.radius[0]), gaussian_index=index,
        minv=sb.geom[0].reshape(3, 3) if disk else None,
    )


def project_backward(sb: SplatBatch, cam: Camera, d_mean, d_geom, d_depth, d_normal):
    """Map splat-space gradients to (d_mu, d_q, d_s) for the visible Gaussians."""
    if sb.mode is RenderMode.ELLIPSOID3D:
        return _ellipsoid_backward(sb, cam, d_mean, d_geom, d_depth)
    return _disk_backward(sb, cam, d_mean, d_geom, d_depth, d_normal)


def _mean_backward(cam, pc, d_mean, d_depth):
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    dpc = np.zeros_like(pc)
    dpc[:, 0] = d_mean[:, 0] * cam.fx / z
    dpc[:, 1] = d_mean[:, 1] * cam.fy / z
    dpc[:, 2] = -d_mean[:, 0] * cam.fx * x / z**2 - d_mean[:, 1] * cam.fy * y / z**2 + d_depth
    return dpc


def _ellipsoid_backward(sb, cam, d_mean, d_conic, d_depth):
    s_ = sb.saved
    pc, J, Sc, Rq = s_["pc"], s_["J"], s_["Sc"], s_["Rq"]
    a, b, c = s_["cov"][:, 0], s_["cov"][:, 1], s_["cov"][:, 2]
    det = a * c - b * b
    d2 = det * det
    gA, gB, gC = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    da = -gA * c * c / d2 + gB * b * c / d2 + gC * (1 / det - a * c / d2)
    db = 2 * gA * b * c / d2 + gB * (-1 / det - 2 * b * b / d2) + 2 * gC * a * b / d2
    dc = gA * (1 / det - a * c / d2) + gB * a * b / d2 - gC * a * a / d2
    Gc = np.empty((len(a), 2, 2))
    Gc[:, 0, 0] = da
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * db
    Gc[:, 1, 1] = dc
    JT = np.transpose(J, (0, 2, 1))
    dSc = JT @ Gc @ J
    dJ = 2.0 * Gc @ J @ Sc
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    tx, ty = _guard_band(cam, x / z, y / z)
    free_x = tx == x / z
    free_y = ty == y / z
    dpc = _mean_backward(cam, pc, d_mean, d_depth)
    # J02 = -fx tx / z: inside the band tx = x / z, outside it is a constant
    dpc[:, 0] += np.where(free_x, dJ[:, 0, 2] * (-cam.fx / z**2), 0.0)
    dpc[:, 1] += np.where(free_y, dJ[:, 1, 2] * (-cam.fy / z**2), 0.0)
    dpc[:, 2] += (dJ[:, 0, 0] * (-cam.fx / z**2) + dJ[:, 0, 2] * cam.fx * tx * np.where(free_x, 2.0, 1.0) / z**2
                  + dJ[:, 1, 1] * (-cam.fy / z**2) + dJ[:, 1, 2] * cam.fy * ty * np.where(free_y, 2.0, 1.0) / z**2)
    d_mu = dpc @ cam.R
    dSw = cam.R.T @ dSc @ cam.R
    Mq = Rq * s_["s"][:, None, :]
    dM = (dSw + np.transpose(dSw, (0, 2, 1))) @ Mq
    d_s = np.sum(dM * Rq, axis=1)
    dRq = dM * s_["s"][:, None, :]
    d_q = normalize_vjp(s_["qn"], s_["qnorm"], rotmat_vjp(s_["qn"], dRq))
    return d_mu, d_q, d_s


def _disk_backward(sb, cam, d_mean, d_minv, d_depth, d_normal):
    s_ = sb.saved
    Minv, Rc, pc = s_["Minv"], s_["Rc"], s_["pc"]
    G = d_minv.reshape(-1, 3, 3)
    MiT = np.transpose(Minv, (0, 2, 1))
    dM = -MiT @ G @ MiT
    dH = cam.K.T @ dM
    su, sv = s_["s"][:, 0], s_["s"][:, 1]
    dRc = np.zeros_like(Rc)
    dRc[:, :, 0] = dH[:, :, 0] * su[:, None]
    dRc[:, :, 1] = dH[:, :, 1] * sv[:, None]
    dRc[:, :, 2] = d_normal * s_["sgn"][:, None]
    d_s = np.stack([np.sum(dH[:, :, 0] * Rc[:, :, 0], axis=1), np.sum(dH[:, :, 1] * Rc[:, :, 1], axis=1)], axis=1)
    dpc = dH[:, :, 2] + _mean_backward(cam, pc, d_mean, d_depth)
    d_mu = dpc @ cam.R
    dRq = cam.R.T @ dRc
    d_q = normalize_vjp(s_["qn"], s_["qnorm"], rotmat_vjp(s_["qn"], dRq))
    return d_mu, d_q, d_s
