# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled front-to-back compositing kernel. Mirrors ``_kernel_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()

cdef double ALPHA_MIN = 1.0 / 255.0
cdef double ALPHA_MAX = 0.99
cdef double T_MIN = 1e-4
cdef double FILTER_INV_SQ = 2.0


cdef inline double _power(int mode, const double[:, ::1] mean2d, const double[:, ::1] geom, Py_ssize_t g,
                          double px, double py, double* aux) noexcept nogil:
    cdef double dx = px - mean2d[g, 0]
    cdef double dy = py - mean2d[g, 1]
    cdef double a0, a1, a2, u, v, rho3, rho2
    aux[0] = dx
    aux[1] = dy
    if mode == 0:
        return -0.5 * (geom[g, 0] * dx * dx + geom[g, 2] * dy * dy) - geom[g, 1] * dx * dy
    a0 = geom[g, 0] * px + geom[g, 1] * py + geom[g, 2]
    a1 = geom[g, 3] * px + geom[g, 4] * py + geom[g, 5]
    a2 = geom[g, 6] * px + geom[g, 7] * py + geom[g, 8]
    if a2 > 0:
        u = a0 / a2
        v = a1 / a2
        rho3 = u * u + v * v
    else:
        u = 0.0
        v = 0.0
        a2 = 1.0
        rho3 = INFINITY
    rho2 = FILTER_INV_SQ * (dx * dx + dy * dy)
    aux[2] = u
    aux[3] = v
    aux[4] = a2
    if rho3 <= rho2:
        aux[5] = 1.0
        return -0.5 * rho3
    aux[5] = 0.0
    return -0.5 * rho2


def forward(int mode, const double[:, ::1] mean2d, const double[:, ::1] geom, const double[::1] opacity,
            const double[:, ::1] feats, const cnp.int64_t[::1] tile_ptr, const cnp.int64_t[::1] tile_ids,
            int W, int H, int tile=16):
    cdef Py_ssize_t C = feats.shape[1]
    out_np = np.zeros((H, W, C))
    T_np = np.ones((H, W))
    last_np = np.zeros((H, W), dtype=np.int64)
    cdef double[:, :, ::1] out = out_np
    cdef double[:, ::1] final_T = T_np
    cdef cnp.int64_t[:, ::1] last = last_np
    cdef int tiles_x = (W + tile - 1) // tile
    cdef Py_ssize_t n_tiles = tile_ptr.shape[0] - 1
    cdef Py_ssize_t t, s, e, j, g, c
    cdef int tx, ty, x, y
    cdef double T, alpha, power, test_T, w
    cdef double aux[6]
    with nogil:
        for t in range(n_tiles):
            s = tile_ptr[t]
            e = tile_ptr[t + 1]
            if s == e:
                continue
            ty = t // tiles_x
            tx = t % tiles_x
            for y in range(ty * tile, min((ty + 1) * tile, H)):
                for x in range(tx * tile, min((tx + 1) * tile, W)):
                    T = 1.0
                    last[y, x] = s
                    for j in range(s, e):
                        g = tile_ids[j]
                        power = _power(mode, mean2d, geom, g, x, y, aux)
                        if power > 0:
                            continue
                        alpha = opacity[g] * exp(power)
                        if alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                        if alpha < ALPHA_MIN:
                            continue
                        test_T = T * (1.0 - alpha)
                        if test_T < T_MIN:
                            break
                        w = alpha * T
                        for c in range(C):
                            out[y, x, c] += w * feats[g, c]
                        T = test_T
                        last[y, x] = j + 1
                    final_T[y, x] = T
    return out_np, T_np, last_np


def backward(int mode, const double[:, ::1] mean2d, const double[:, ::1] geom, const double[::1] opacity,
             const double[:, ::1] feats, const cnp.int64_t[::1] tile_ptr, const cnp.int64_t[::1] tile_ids,
             int W, int H, const double[:, ::1] final_T, const cnp.int64_t[:, ::1] last,
             const double[:, :, ::1] g_feats, const double[:, ::1] g_alpha, int tile=16):
    cdef Py_ssize_t P = feats.shape[0]
    cdef Py_ssize_t C = feats.shape[1]
    cdef Py_ssize_t NG = geom.shape[1]
    d_opac_np = np.zeros(P)
    d_feats_np = np.zeros((P, C))
    d_geom_np = np.zeros((P, NG))
    d_mean_np = np.zeros((P, 2))
    d_shift_np = np.zeros((P, 2))
    cdef double[::1] d_opac = d_opac_np
    cdef double[:, ::1] d_feats = d_feats_np
    cdef double[:, ::1] d_geom = d_geom_np
    cdef double[:, ::1] d_mean = d_mean_np
    cdef double[:, ::1] d_shift = d_shift_np
    S_np = np.zeros(C)
    cdef double[::1] S = S_np
    cdef int tiles_x = (W + tile - 1) // tile
    cdef Py_ssize_t n_tiles = tile_ptr.shape[0] - 1
    cdef Py_ssize_t t, s, e, j, g, c
    cdef int tx, ty, x, y
    cdef double T, alpha, raw, G, power, dalpha, dpow, Sa, w, ga, dx, dy, u, v, a2, da0, da1, da2, gmx, gmy
    cdef double aux[6]
    with nogil:
        for t in range(n_tiles):
            s = tile_ptr[t]
            e = tile_ptr[t + 1]
            if s == e:
                continue
            ty = t // tiles_x
            tx = t % tiles_x
            for y in range(ty * tile, min((ty + 1) * tile, H)):
                for x in range(tx * tile, min((tx + 1) * tile, W)):
                    T = final_T[y, x]
                    for c in range(C):
                        S[c] = 0.0
                    Sa = 0.0
                    ga = g_alpha[y, x]
                    j = last[y, x] - 1
                    while j >= s:
                        g = tile_ids[j]
                        j -= 1
                        power = _power(mode, mean2d, geom, g, x, y, aux)
                        if power > 0:
                            continue
                        G = exp(power)
                        raw = opacity[g] * G
                        alpha = raw if raw < ALPHA_MAX else ALPHA_MAX
                        if alpha < ALPHA_MIN:
                            continue
                        T = T / (1.0 - alpha)
                        w = alpha * T
                        dalpha = ga * (T - Sa / (1.0 - alpha))
                        for c in range(C):
                            d_feats[g, c] += w * g_feats[y, x, c]
                            dalpha += g_feats[y, x, c] * (feats[g, c] * T - S[c] / (1.0 - alpha))
                            S[c] += feats[g, c] * w
                        Sa += w
                        if raw >= ALPHA_MAX:
                            continue
                        d_opac[g] += dalpha * G
                        dpow = dalpha * opacity[g] * G
                        dx = aux[0]
                        dy = aux[1]
                        if mode == 0:
                            d_geom[g, 0] += dpow * -0.5 * dx * dx
                            d_geom[g, 1] += dpow * -dx * dy
                            d_geom[g, 2] += dpow * -0.5 * dy * dy
                            gmx = dpow * (geom[g, 0] * dx + geom[g, 1] * dy)
                            gmy = dpow * (geom[g, 1] * dx + geom[g, 2] * dy)
                            d_mean[g, 0] += gmx
                            d_mean[g, 1] += gmy
                            d_shift[g, 0] += gmx
                            d_shift[g, 1] += gmy
                        elif aux[5] > 0.5:
                            u = aux[2]
                            v = aux[3]
                            a2 = aux[4]
                            da0 = dpow * -u / a2
                            da1 = dpow * -v / a2
                            da2 = dpow * (u * u + v * v) / a2
                            d_geom[g, 0] += da0 * x
                            d_geom[g, 1] += da0 * y
                            d_geom[g, 2] += da0
                            d_geom[g, 3] += da1 * x
                            d_geom[g, 4] += da1 * y
                            d_geom[g, 5] += da1
                            d_geom[g, 6] += da2 * x
                            d_geom[g, 7] += da2 * y
                            d_geom[g, 8] += da2
                            d_shift[g, 0] -= da0 * geom[g, 0] + da1 * geom[g, 3] + da2 * geom[g, 6]
                            d_shift[g, 1] -= da0 * geom[g, 1] + da1 * geom[g, 4] + da2 * geom[g, 7]
                        else:
                            gmx = dpow * FILTER_INV_SQ * dx
                            gmy = dpow * FILTER_INV_SQ * dy
                            d_mean[g, 0] += gmx
                            d_mean[g, 1] += gmy
                            d_shift[g, 0] += gmx
                            d_shift[g, 1] += gmy
    return d_opac_np, d_feats_np, d_geom_np, d_mean_np, d_shift_np
