"""Normals from depth maps by central differences of back-projected points."""
import numpy as np


def _backproject(depth, cam):
    return depth[..., None] * cam.pixel_rays()


def _valid_mask(depth):
    H, W = depth.shape
    valid = np.zeros((H, W), dtype=bool)
    pos = depth > 0
    valid[1:-1, 1:-1] = (
        pos[1:-1, 1:-1] & pos[1:-1, 2:] & pos[1:-1, :-2] & pos[2:, 1:-1] & pos[:-2, 1:-1]
    )
    return valid


def depth_to_normal(depth, cam, return_aux=False):
    """Unit camera-space normals (H, W, 3) facing the camera; zero where invalid.

    A pixel is valid only if it and its 4-neighbours all have positive depth,
    so image borders and the 1-ring around holes are invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    P = _backproject(depth, cam)
    H, W = depth.shape
    dx = np.zeros((H, W, 3))
    dy = np.zeros((H, W, 3))
    dx[:, 1:-1] = 0.5 * (P[:, 2:] - P[:, :-2])
    dy[1:-1, :] = 0.5 * (P[2:, :] - P[:-2, :])
    c = np.cross(dy, dx)
    norm = np.linalg.norm(c, axis=-1)
    valid = _valid_mask(depth) & (norm > 0)
    n = np.zeros((H, W, 3))
    n[valid] = c[valid] / norm[valid][:, None]
    if return_aux:
        return n, dict(dx=dx, dy=dy, c=c, norm=norm, valid=valid)
    return n


def depth_to_normal_backward(depth, cam, g_normal, aux=None):
    """Vector-Jacobian product of :func:`depth_to_normal` w.r.t. depth."""
    if aux is None:
        _, aux = depth_to_normal(depth, cam, return_aux=True)
    valid = aux["valid"]
    H, W = depth.shape
    g = np.where(valid[..., None], g_normal, 0.0)
    norm = np.where(valid, aux["norm"], 1.0)[..., None]
    n = aux["c"] / norm
    dc = (g - n * np.sum(n * g, axis=-1, keepdims=True)) / norm
    dc = np.where(valid[..., None], dc, 0.0)
    d_dy = np.cross(aux["dx"], dc)
    d_dx = np.cross(dc, aux["dy"])
    dP = np.zeros((H, W, 3))
    dP[:, 2:] += 0.5 * d_dx[:, 1:-1]
    dP[:, :-2] -= 0.5 * d_dx[:, 1:-1]
    dP[2:, :] += 0.5 * d_dy[1:-1, :]
    dP[:-2, :] -= 0.5 * d_dy[1:-1, :]
    return np.sum(dP * cam.pixel_rays(), axis=-1)
