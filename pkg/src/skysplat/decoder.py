"""Anchor decoding: small MLP heads turn anchor features into neural Gaussians.

Also holds LOD anchor selection and baking of the hybrid model into an
explicit Gaussian set with degree-2 spherical-harmonic color.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContextMismatch, DegenerateFit
from .geometry import normalize_vjp, quat_normalize
from .scene import AnchorField, Camera, GaussianBatch, RenderMode, StageTag

OPACITY_CULL = 0.005
HEADS = ("opacity", "color", "cov")

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MLP:
    """Two-layer perceptron, tanh hidden activation, linear output."""

    def __init__(self, n_in, n_hidden, n_out, rng=None, zero=False):
        if zero or rng is None:
            self.W1 = np.zeros((n_in, n_hidden))
            self.W2 = np.zeros((n_hidden, n_out))
        else:
            self.W1 = rng.uniform(-1, 1, (n_in, n_hidden)) * np.sqrt(6.0 / (n_in + n_hidden))
            self.W2 = rng.uniform(-1, 1, (n_hidden, n_out)) * np.sqrt(6.0 / (n_hidden + n_out))
        self.b1 = np.zeros(n_hidden)
        self.b2 = np.zeros(n_out)

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def forward(self, x):
        h = np.tanh(x @ self.W1 + self.b1)
        return h @ self.W2 + self.b2, (x, h)

    def backward(self, cache, gy):
        x, h = cache
        dW2 = h.T @ gy
        db2 = gy.sum(axis=0)
        dh = gy @ self.W2.T
        dz = dh * (1.0 - h * h)
        return {"W1": x.T @ dz, "b1": dz.sum(axis=0), "W2": dW2, "b2": db2}, dz @ self.W1.T


class DecoderBank:
    """Opacity, color and covariance heads plus the per-image appearance table."""

    def __init__(self, feature_dim=32, k=10, n_images=1, appearance_dim=16, hidden=32, rng=None,
                 dist_scale=1.0, zero=False):
        self.feature_dim = feature_dim
        self.k = k
        self.appearance_dim = appearance_dim
        self.hidden = hidden
        self.dist_scale = float(dist_scale)
        self.bake_distance: Optional[float] = None
        self.frozen = False
        n_base = feature_dim + 4
        self.heads = {
            "opacity": MLP(n_base, hidden, k, rng, zero),
            "color": MLP(n_base + appearance_dim, hidden, 3 * k, rng, zero),
            "cov": MLP(n_base, hidden, 7 * k, rng, zero),
        }
        # identity rotation as the initial quaternion (a zero quaternion has no direction)
        self.heads["cov"].b2.reshape(k, 7)[:, 3] = 1.0
        self.appearance = np.zeros((n_images, appearance_dim))

    def params(self):
        out = {}
        for name, mlp in self.heads.items():
            for pname, arr in mlp.params().items():
                out[f"{name}.{pname}"] = arr
        out["appearance"] = self.appearance
        return out

    def set_param(self, name, value):
        if name == "appearance":
            self.appearance = value
            return
        head, pname = name.split(".")
        setattr(self.heads[head], pname, value)

    def copy(self) -> "DecoderBank":
        other = DecoderBank.__new__(DecoderBank)
        other.__dict__.update(self.__dict__)
        other.heads = {}
        for name, mlp in self.heads.items():
            m = MLP.__new__(MLP)
            m.W1, m.b1, m.W2, m.b2 = mlp.W1.copy(), mlp.b1.copy(), mlp.W2.copy(), mlp.b2.copy()
            other.heads[name] = m
        other.appearance = self.appearance.copy()
        return other

    def embedding(self, appearance_id):
        if appearance_id is None or appearance_id < 0 or appearance_id >= len(self.appearance):
            return self.appearance.mean(axis=0)
        return self.appearance[appearance_id]


def select_anchors(field_: AnchorField, cam: Camera, active_levels: int) -> np.ndarray:
    """Indices of anchors rendered for ``cam`` with ``active_levels`` LOD levels enabled.

    Level 0 is always eligible; level l > 0 needs the camera within
    ``level_distance_cutoffs[l]`` of the anchor.
    """
    K = field_.lod.K
    if not 1 <= active_levels <= K:
        raise ValueError(f"active_levels must be in [1, {K}]")
    ok = field_.levels < active_levels
    cut = field_.lod.level_distance_cutoffs
    if cut:
        dist = np.linalg.norm(field_.positions - cam.center, axis=1)
        limit = np.asarray(cut)[np.minimum(field_.levels, K - 1)]
        ok &= (field_.levels == 0) | (dist <= limit)
    return np.nonzero(ok)[0]


@dataclass
class DecodeContext:
    field_size: int
    anchor_idx: np.ndarray
    keep: np.ndarray           # flat mask over anchor_idx x k
    mode: RenderMode
    appearance_id: int
    x_base: np.ndarray
    x_color: np.ndarray
    caches: dict
    op: np.ndarray
    col: np.ndarray
    sig_s: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    scaling: np.ndarray
    offsets: np.ndarray
    stage: np.ndarray
    frozen: bool
    token: object = field(default_factory=object)


def _view_inputs(positions, features, center, dist_scale):
    view = center[None, :] - positions
    dist = np.linalg.norm(view, axis=1, keepdims=True)
    direction = view / np.maximum(dist, 1e-12)
    return np.concatenate([features, direction, dist / dist_scale], axis=1)


def decode(field_: AnchorField, anchor_idx, bank: DecoderBank, cam: Camera, appearance_id=None,
           mode=RenderMode.ELLIPSOID3D, return_context=True):
    """Emit k Gaussians per selected anchor; drop those with opacity <= 0.005."""
    mode = RenderMode.parse(mode)
    idx = np.asarray(anchor_idx, dtype=np.int64)
    k = field_.k
    pos = field_.positions[idx]
    scaling = field_.scaling[idx]
    offsets = field_.offsets[idx]
    x_base = _view_inputs(pos, field_.features[idx], cam.center, bank.dist_scale)
    app = bank.embedding(appearance_id if appearance_id is not None else cam.appearance_id)
    x_color = np.concatenate([x_base, np.broadcast_to(app, (len(idx), len(app)))], axis=1)
    o_raw, c_op = bank.heads["opacity"].forward(x_base)
    c_raw, c_col = bank.heads["color"].forward(x_color)
    v_raw, c_cov = bank.heads["cov"].forward(x_base)
    op = _sigmoid(o_raw)                                   # (n, k)
    col = _sigmoid(c_raw).reshape(-1, k, 3)
    v = v_raw.reshape(-1, k, 7)
    sdim = 3 if mode is RenderMode.ELLIPSOID3D else 2
    sig_s = _sigmoid(v[..., :sdim])
    s = scaling[:, None, :sdim] * sig_s
    qn, qnorm = quat_normalize(v[..., 3:7])
    mu = pos[:, None, :] + offsets * scaling[:, None, :]
    keep = (op > OPACITY_CULL).reshape(-1)
    src = np.repeat(idx, k)
    g = GaussianBatch(
        mu.reshape(-1, 3)[keep], qn.reshape(-1, 4)[keep], s.reshape(-1, sdim)[keep], op.reshape(-1)[keep],
        col.reshape(-1, 3)[keep], src[keep], field_.levels[src][keep],
    )
    if not return_context:
        return g
    ctx = DecodeContext(
        len(field_), idx, keep, mode, appearance_id if appearance_id is not None else cam.appearance_id,
        x_base, x_color, {"opacity": c_op, "color": c_col, "cov": c_cov}, op, col, sig_s, qn, qnorm,
        scaling, offsets, field_.stage[idx], bank.frozen,
    )
    return g, ctx


def decode_backward(ctx: DecodeContext, bank: DecoderBank, d_mu, d_q, d_s, d_sigma, d_color, field_size=None):
    """Chain rule back to anchor and MLP parameters.

    Gradient arrays are per kept Gaussian. Returns a dict with full-field
    ``features``, ``offsets``, ``log_scaling`` plus one entry per bank parameter.
    Coarse-tagged anchors and the bank receive zero gradient when the bank is frozen.
    """
    if not isinstance(ctx, DecodeContext):
        raise ContextMismatch("decode_backward needs the context returned by decode()")
    n_keep = int(ctx.keep.sum())
    for name, arr in (("mu", d_mu), ("q", d_q), ("sigma", d_sigma), ("color", d_color)):
        if len(arr) != n_keep:
            raise ContextMismatch(f"gradient '{name}' has {len(arr)} rows, decode emitted {n_keep}")
    if field_size is not None and field_size != ctx.field_size:
        raise ContextMismatch("anchor field changed since decode()")
    n = len(ctx.anchor_idx)
    k = ctx.op.shape[1]
    sdim = ctx.sig_s.shape[2]

    def scatter(src, width):
        full = np.zeros((n * k, width))
        full[ctx.keep] = src.reshape(n_keep, width)
        return full.reshape(n, k, width)

    g_mu = scatter(d_mu, 3)
    g_q = scatter(d_q, 4)
    g_s = scatter(d_s, sdim)
    g_op = scatter(d_sigma, 1)[..., 0]
    g_col = scatter(d_color, 3)

    g_oraw = g_op * ctx.op * (1.0 - ctx.op)
    g_craw = (g_col * ctx.col * (1.0 - ctx.col)).reshape(n, 3 * k)
    g_v = np.zeros((n, k, 7))
    sc = ctx.scaling[:, None, :sdim]
    g_v[..., :sdim] = g_s * sc * ctx.sig_s * (1.0 - ctx.sig_s)
    g_v[..., 3:7] = normalize_vjp(ctx.qn, ctx.qnorm, g_q)
    g_scaling = np.zeros((n, 3))
    g_scaling[:, :sdim] += np.sum(g_s * ctx.sig_s, axis=1)
    g_scaling += np.sum(g_mu * ctx.offsets, axis=1)
    g_offsets = g_mu * ctx.scaling[:, None, :]
    g_log_scaling = g_scaling * ctx.scaling

    out = {}
    gp_op, gx_op = bank.heads["opacity"].backward(ctx.caches["opacity"], g_oraw)
    gp_col, gx_col = bank.heads["color"].backward(ctx.caches["color"], g_craw)
    gp_cov, gx_cov = bank.heads["cov"].backward(ctx.caches["cov"], g_v.reshape(n, 7 * k))
    F = bank.feature_dim
    g_feat = gx_op[:, :F] + gx_col[:, :F] + gx_cov[:, :F]
    for head, gp in (("opacity", gp_op), ("color", gp_col), ("cov", gp_cov)):
        for pname, arr in gp.items():
            out[f"{head}.{pname}"] = arr
    g_app = np.zeros_like(bank.appearance)
    app_grad = gx_col[:, F + 4:].sum(axis=0)
    aid = ctx.appearance_id
    if aid is not None and 0 <= aid < len(g_app):
        g_app[aid] = app_grad
    elif len(g_app):
        g_app += app_grad / len(g_app)
    out["appearance"] = g_app

    N = ctx.field_size
    feats = np.zeros((N, F))
    offs = np.zeros((N, k, 3))
    logs = np.zeros((N, 3))
    np.add.at(feats, ctx.anchor_idx, g_feat)
    np.add.at(offs, ctx.anchor_idx, g_offsets)
    np.add.at(logs, ctx.anchor_idx, g_log_scaling)
    if ctx.frozen:
        coarse = np.zeros(N, dtype=bool)
        coarse[ctx.anchor_idx[ctx.stage == StageTag.COARSE]] = True
        feats[coarse] = 0.0
        offs[coarse] = 0.0
        logs[coarse] = 0.0
        for name in list(out):
            out[name] = np.zeros_like(out[name])
    out["features"] = feats
    out["offsets"] = offs
    out["log_scaling"] = logs
    return out


# ---------------------------------------------------------------- baking

def sh_basis(dirs):
    """Real SH basis up to degree 2 for unit directions (N, 3) -> (N, 9)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * z * z - x * x - y * y),
        SH_C2[3] * x * z, SH_C2[4] * (x * x - y * y),
    ], axis=1)


def fibonacci_sphere(n=64):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@dataclass
class BakedGaussianSet:
    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray            # (P, 9, 3); color = basis . sh, no offset
    level: np.ndarray
    anchor_pos: np.ndarray
    residual: np.ndarray
    appearance: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.mu)

    @staticmethod
    def empty(sdim=3):
        return BakedGaussianSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, sdim)), np.zeros(0),
                                np.zeros((0, 9, 3)), np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0))

    def take(self, idx):
        return BakedGaussianSet(self.mu[idx], self.q[idx], self.s[idx], self.opacity[idx], self.sh[idx],
                                self.level[idx], self.anchor_pos[idx], self.residual[idx], self.appearance)

    @staticmethod
    def concat(sets):
        sets = [s for s in sets if s is not None]
        if not sets:
            return BakedGaussianSet.empty()
        app = sets[0].appearance
        return BakedGaussianSet(*(np.concatenate([getattr(s, f) for s in sets]) for f in
                                  ("mu", "q", "s", "opacity", "sh", "level", "anchor_pos", "residual")), app)


def bake_explicit(field_: AnchorField, bank: DecoderBank, mode=RenderMode.ELLIPSOID3D, n_dirs=64,
                  canonical_distance=None) -> BakedGaussianSet:
    """Evaluate the heads once per anchor and fit SH color over sampled directions.

    Opacity and covariance use a canonical viewer straight above the anchor
    (looking down). Color is sampled from ``n_dirs`` Fibonacci directions at
    the canonical distance and least-squares fit to degree-2 SH.
    """
    mode = RenderMode.parse(mode)
    sdim = 3 if mode is RenderMode.ELLIPSOID3D else 2
    if len(field_) == 0:
        return BakedGaussianSet.empty(sdim)
    k = field_.k
    dist = canonical_distance
    if dist is None:
        dist = bank.bake_distance if bank.bake_distance is not None else 0.5 * bank.dist_scale
    n = len(field_)
    feats = field_.features
    scaling = field_.scaling
    dist_col = np.full((n, 1), dist / bank.dist_scale)
    x_base = np.concatenate([feats, np.tile([0.0, 0.0, 1.0], (n, 1)), dist_col], axis=1)
    op = _sigmoid(bank.heads["opacity"].forward(x_base)[0])
    v = bank.heads["cov"].forward(x_base)[0].reshape(n, k, 7)
    s = scaling[:, None, :sdim] * _sigmoid(v[..., :sdim])
    qn, _ = quat_normalize(v[..., 3:7])
    mu = field_.positions[:, None, :] + field_.offsets * scaling[:, None, :]

    dirs = fibonacci_sphere(n_dirs)          # camera -> Gaussian
    B = sh_basis(dirs)
    if np.linalg.matrix_rank(B) < B.shape[1]:
        raise DegenerateFit("SH design matrix is rank deficient")
    app = bank.appearance.mean(axis=0) if len(bank.appearance) else np.zeros(bank.appearance_dim)
    samples = np.empty((n_dirs, n, 3 * k))
    for i, d in enumerate(dirs):
        xb = np.concatenate([feats, np.tile(-d, (n, 1)), dist_col, np.tile(app, (n, 1))], axis=1)
        samples[i] = _sigmoid(bank.heads["color"].forward(xb)[0])
    Y = samples.reshape(n_dirs, -1)
    coef, *_ = np.linalg.lstsq(B, Y, rcond=None)
    fit = B @ coef
    resid = (fit - Y).reshape(n_dirs, n, k, 3)
    rms = np.sqrt(np.mean(resid ** 2, axis=(0, 3))).reshape(-1)
    sh = coef.reshape(9, n, k, 3).transpose(1, 2, 0, 3).reshape(n * k, 9, 3)

    keep = (op > OPACITY_CULL).reshape(-1)
    lv = np.repeat(field_.levels, k)
    apos = np.repeat(field_.positions, k, axis=0)
    return BakedGaussianSet(mu.reshape(-1, 3)[keep], qn.reshape(-1, 4)[keep], s.reshape(-1, sdim)[keep],
                            op.reshape(-1)[keep], sh[keep], lv[keep], apos[keep], rms[keep],
                            bank.appearance.copy())


def fit_sh(dirs, values, degree=2):
    """Least-squares SH fit of ``values`` (N, C) sampled at ``dirs``; returns (coef, rms)."""
    B = sh_basis(dirs)[:, : (degree + 1) ** 2]
    coef, *_ = np.linalg.lstsq(B, values, rcond=None)
    rms = np.sqrt(np.mean((B @ coef - values) ** 2))
    return coef, rms


def select_baked(baked: BakedGaussianSet, lod, cam: Camera, active_levels=None):
    K = lod.K
    active_levels = K if active_levels is None else active_levels
    ok = baked.level < active_levels
    if lod.level_distance_cutoffs:
        d = np.linalg.norm(baked.anchor_pos - cam.center, axis=1)
        ok &= (baked.level == 0) | (d <= np.asarray(lod.level_distance_cutoffs)[np.minimum(baked.level, K - 1)])
    return np.nonzero(ok)[0]


def baked_to_gaussians(baked: BakedGaussianSet, cam: Camera, idx=None) -> GaussianBatch:
    b = baked if idx is None else baked.take(idx)
    d = b.mu - cam.center
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    color = np.clip(np.einsum("pj,pjc->pc", sh_basis(d), b.sh), 0.0, 1.0)
    return GaussianBatch(b.mu, b.q, b.s, b.opacity, color, None, b.level)
