"""Pure numpy compositing kernel, vectorized per tile.

Same contract as the compiled ``_kernel`` extension; selected when the
extension is unavailable or ``SKYSPLAT_PURE=1``.
"""
import numpy as np

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
FILTER_INV_SQ = 2.0


def _powers(mode, mean2d, geom, px, py):
    """power[pix, splat] plus the pieces needed for the backward pass."""
    dx = px[:, None] - mean2d[None, :, 0]
    dy = py[:, None] - mean2d[None, :, 1]
    if mode == 0:
        A, B, C = geom[None, :, 0], geom[None, :, 1], geom[None, :, 2]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        return power, (dx, dy)
    m = geom
    a0 = m[None, :, 0] * px[:, None] + m[None, :, 1] * py[:, None] + m[None, :, 2]
    a1 = m[None, :, 3] * px[:, None] + m[None, :, 4] * py[:, None] + m[None, :, 5]
    a2 = m[None, :, 6] * px[:, None] + m[None, :, 7] * py[:, None] + m[None, :, 8]
    front = a2 > 0
    a2s = np.where(front, a2, 1.0)
    u = a0 / a2s
    v = a1 / a2s
    rho3 = np.where(front, u * u + v * v, np.inf)
    rho2 = FILTER_INV_SQ * (dx * dx + dy * dy)
    use3 = rho3 <= rho2
    power = -0.5 * np.where(use3, rho3, rho2)
    return power, (dx, dy, u, v, a2s, use3)


def _tile_pixels(tx, ty, W, H, tile):
    xs = np.arange(tx * tile, min((tx + 1) * tile, W))
    ys = np.arange(ty * tile, min((ty + 1) * tile, H))
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return gx.ravel(), gy.ravel()


def _alphas(mode, mean2d, geom, opacity, ids, px, py):
    power, aux = _powers(mode, mean2d[ids], geom[ids], px.astype(np.float64), py.astype(np.float64))
    G = np.exp(np.minimum(power, 0.0))
    raw = opacity[ids][None, :] * G
    alpha = np.minimum(ALPHA_MAX, raw)
    active = (power <= 0) & (alpha >= ALPHA_MIN)
    alpha = np.where(active, alpha, 0.0)
    # termination: stop before the splat that would drop T below T_MIN
    one_minus = 1.0 - alpha
    T_after = np.cumprod(one_minus, axis=1)
    stop = T_after < T_MIN
    first_stop = np.where(stop.any(axis=1), stop.argmax(axis=1), alpha.shape[1])
    keep = np.arange(alpha.shape[1])[None, :] < first_stop[:, None]
    alpha = np.where(keep, alpha, 0.0)
    active &= keep
    return alpha, active, G, raw, power, aux, first_stop


def forward(mode, mean2d, geom, opacity, feats, tile_ptr, tile_ids, W, H, tile=16):
    C = feats.shape[1]
    out = np.zeros((H, W, C))
    final_T = np.ones((H, W))
    last = np.zeros((H, W), dtype=np.int64)
    tiles_x = (W + tile - 1) // tile
    n_tiles = len(tile_ptr) - 1
    for t in range(n_tiles):
        s, e = tile_ptr[t], tile_ptr[t + 1]
        if s == e:
            continue
        ty, tx = divmod(t, tiles_x)
        px, py = _tile_pixels(tx, ty, W, H, tile)
        ids = tile_ids[s:e]
        alpha, active, *_ , first_stop = _alphas(mode, mean2d, geom, opacity, ids, px, py)
        T_before = np.cumprod(np.concatenate([np.ones((len(px), 1)), 1.0 - alpha[:, :-1]], axis=1), axis=1)
        w = alpha * T_before
        out[py, px] = w @ feats[ids]
        final_T[py, px] = T_before[:, -1] * (1.0 - alpha[:, -1])
        # last contributing list position (exclusive)
        any_act = active.any(axis=1)
        last_pos = np.where(any_act, alpha.shape[1] - np.argmax(active[:, ::-1], axis=1), 0)
        last[py, px] = s + last_pos
    return out, final_T, last


def backward(mode, mean2d, geom, opacity, feats, tile_ptr, tile_ids, W, H, final_T, last, g_feats, g_alpha,
             tile=16):
    P, C = feats.shape
    G_ = geom.shape[1]
    d_opac = np.zeros(P)
    d_feats = np.zeros((P, C))
    d_geom = np.zeros((P, G_))
    d_mean = np.zeros((P, 2))
    d_shift = np.zeros((P, 2))
    tiles_x = (W + tile - 1) // tile
    for t in range(len(tile_ptr) - 1):
        s, e = tile_ptr[t], tile_ptr[t + 1]
        if s == e:
            continue
        ty, tx = divmod(t, tiles_x)
        px, py = _tile_pixels(tx, ty, W, H, tile)
        ids = tile_ids[s:e]
        alpha, active, G, raw, power, aux, _ = _alphas(mode, mean2d, geom, opacity, ids, px, py)
        T_before = np.cumprod(np.concatenate([np.ones((len(px), 1)), 1.0 - alpha[:, :-1]], axis=1), axis=1)
        w = alpha * T_before
        gf = g_feats[py, px]            # (n, C)
        ga = g_alpha[py, px]            # (n,)
        f = feats[ids]                  # (L, C)
        contrib = w[:, :, None] * f[None, :, :]
        # S_after[p, i] = sum_{j>i} contrib
        rev = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1]
        S_after = rev - contrib
        wa_rev = np.cumsum(w[:, ::-1], axis=1)[:, ::-1]
        Sa_after = wa_rev - w
        one_minus = 1.0 - alpha
        dalpha = (np.einsum("pc,pic->pi", gf, f[None, :, :] * T_before[:, :, None] - S_after / one_minus[:, :, None])
                  + ga[:, None] * (T_before - Sa_after / one_minus))
        dalpha = np.where(active, dalpha, 0.0)
        np.add.at(d_feats, ids, np.einsum("pi,pc->ic", w, gf))
        unclamped = active & (raw < ALPHA_MAX)
        dal = np.where(unclamped, dalpha, 0.0)
        np.add.at(d_opac, ids, np.sum(dal * G, axis=0))
        dpow = dal * opacity[ids][None, :] * G
        if mode == 0:
            dx, dy = aux
            A, B, Cc = geom[ids, 0][None], geom[ids, 1][None], geom[ids, 2][None]
            np.add.at(d_geom, ids, np.stack([np.sum(dpow * -0.5 * dx * dx, 0), np.sum(dpow * -dx * dy, 0),
                                             np.sum(dpow * -0.5 * dy * dy, 0)], axis=1))
            gmx = np.sum(dpow * (A * dx + B * dy), axis=0)
            gmy = np.sum(dpow * (B * dx + Cc * dy), axis=0)
            gm = np.stack([gmx, gmy], axis=1)
            np.add.at(d_mean, ids, gm)
            np.add.at(d_shift, ids, gm)
        else:
            dx, dy, u, v, a2s, use3 = aux
            m = geom[ids]
            d3 = np.where(use3, dpow, 0.0)
            d2 = np.where(use3, 0.0, dpow)
            # power = -0.5 (u^2 + v^2), u = a0/a2, v = a1/a2
            da0 = d3 * -u / a2s
            da1 = d3 * -v / a2s
            da2 = d3 * (u * u + v * v) / a2s
            pxf = px.astype(np.float64)[:, None]
            pyf = py.astype(np.float64)[:, None]
            dg = np.stack([np.sum(da0 * pxf, 0), np.sum(da0 * pyf, 0), np.sum(da0, 0),
                           np.sum(da1 * pxf, 0), np.sum(da1 * pyf, 0), np.sum(da1, 0),
                           np.sum(da2 * pxf, 0), np.sum(da2 * pyf, 0), np.sum(da2, 0)], axis=1)
            np.add.at(d_geom, ids, dg)
            # power = -FILTER_INV_SQ/2 |p - m|^2
            gm = np.stack([np.sum(d2 * FILTER_INV_SQ * dx, 0), np.sum(d2 * FILTER_INV_SQ * dy, 0)], axis=1)
            np.add.at(d_mean, ids, gm)
            # shift of the whole footprint = -(d power / d pixel)
            dpx = da0 * m[None, :, 0] + da1 * m[None, :, 3] + da2 * m[None, :, 6]
            dpy = da0 * m[None, :, 1] + da1 * m[None, :, 4] + da2 * m[None, :, 7]
            np.add.at(d_shift, ids, gm - np.stack([np.sum(dpx, 0), np.sum(dpy, 0)], axis=1))
    return d_opac, d_feats, d_geom, d_mean, d_shift
