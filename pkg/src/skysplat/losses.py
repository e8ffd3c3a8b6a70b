"""Training losses with analytic gradients, and masked evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import AllMasked, ModeMismatch, ShapeMismatch
from .render.normals import depth_to_normal, depth_to_normal_backward
from .scene import RenderMode

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LOG_CLAMP = 1e-6


@dataclass
class LossConfig:
    lambda_ssim: float = 0.2
    lambda_vol: float = 0.01
    lambda_o: float = 0.05
    lambda_n: float = 0.05
    lambda_d_start: float = 1.0
    lambda_d_end: float = 0.01
    depth_start_iter: int = 500
    normal_start_iter: int = 7000
    total_iters: int = 100000

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_vol", "lambda_o", "lambda_n", "lambda_d_start", "lambda_d_end"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def depth_weight(self, iteration: int) -> float:
        frac = min(max(iteration / max(self.total_iters, 1), 0.0), 1.0)
        return self.lambda_d_start * (self.lambda_d_end / self.lambda_d_start) ** frac


@dataclass
class SupervisionBundle:
    gt_rgb: np.ndarray
    gt_inv_depth: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None      # 1 = transient / sky, suppressed
    valid: Optional[np.ndarray] = None     # depth validity

    def __post_init__(self):
        H, W = self.gt_rgb.shape[:2]
        if self.mask is None:
            self.mask = np.zeros((H, W))
        self.mask = (np.asarray(self.mask) > 0.5).astype(np.float64)
        if self.gt_inv_depth is not None and self.valid is None:
            self.valid = self.gt_inv_depth > 0


@dataclass
class LossResult:
    total: float
    terms: dict
    grads: dict = field(default_factory=dict)


def _gauss_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


_WINDOW = _gauss_window()


def _blur(x):
    """Separable 11x11 Gaussian filter over the first two axes with zero padding.

    With a symmetric kernel the operator is self-adjoint, so it is also its
    own backward pass.
    """
    y = correlate1d(x, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _WINDOW, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * (exy - mx * my) + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    return (A1 * A2) / (B1 * B2), (mx, my, A1, A2, B1, B2)


def ssim_map_and_grad(x, y, weights):
    """Weighted mean SSIM over (H, W, C) images and its gradient w.r.t. ``x``.

    ``weights`` is (H, W); the mean is over weighted pixels and channels.
    """
    S, (mx, my, A1, A2, B1, B2) = _ssim_terms(x, y)
    C = x.shape[2] if x.ndim == 3 else 1
    w = weights[..., None] if x.ndim == 3 else weights
    denom = weights.sum() * C
    val = float(np.sum(S * w) / denom)
    gS = np.broadcast_to(w, S.shape) / denom
    BB = B1 * B2
    dA1 = gS * A2 / BB
    dA2 = gS * A1 / BB
    dB1 = -gS * S / B1
    dB2 = -gS * S / B2
    g_mx = dA1 * 2 * my - dA2 * 2 * my + dB1 * 2 * mx - dB2 * 2 * mx
    g_exx = dB2
    g_exy = 2 * dA2
    dx = _blur(g_mx) + 2 * x * _blur(g_exx) + y * _blur(g_exy)
    return val, dx


def _check_shapes(out, sup):
    H, W = out.alpha.shape
    if out.rgb.shape != sup.gt_rgb.shape or sup.mask.shape != (H, W):
        raise ShapeMismatch(f"render {out.rgb.shape} vs supervision {sup.gt_rgb.shape}/{sup.mask.shape}")
    if sup.gt_inv_depth is not None and sup.gt_inv_depth.shape != (H, W):
        raise ShapeMismatch("inverse depth shape mismatch")


def opacity_mask_loss(alpha, mask):
    """Entropy-style opacity regularizer on the rendered alpha map; returns (value, d/dalpha)."""
    hw = alpha.size
    a = np.clip(alpha, LOG_CLAMP, 1 - LOG_CLAMP)
    val = float(-np.sum(a * np.log(a)) / hw - np.sum(mask * np.log(1 - a)) / hw)
    inside = (alpha > LOG_CLAMP) & (alpha < 1 - LOG_CLAMP)
    grad = np.where(inside, (-(np.log(a) + 1.0) + mask / (1 - a)) / hw, 0.0)
    return val, grad


def volume_loss(scales, visible=None):
    s = scales if visible is None else scales[visible]
    n = len(s)
    g = np.zeros_like(scales)
    if n == 0:
        return 0.0, g
    prod = np.prod(s, axis=1)
    val = float(prod.mean())
    gs = prod[:, None] / s / n
    if visible is None:
        g = gs
    else:
        g[visible] = gs
    return val, g


def loss_render(out, sup: SupervisionBundle, cfg: LossConfig, iteration: int) -> LossResult:
    _check_shapes(out, sup)
    H, W = out.alpha.shape
    keep = 1.0 - sup.mask
    n_keep = keep.sum()
    terms = {}
    g_rgb = np.zeros_like(out.rgb)
    if n_keep > 0:
        diff = (out.rgb - sup.gt_rgb) * keep[..., None]
        denom = n_keep * 3
        terms["l1"] = float(np.abs(diff).sum() / denom)
        g_rgb += np.sign(diff) / denom
        sval, sgrad = ssim_map_and_grad(out.rgb * keep[..., None], sup.gt_rgb * keep[..., None], keep)
        terms["ssim"] = 1.0 - sval
        g_rgb += -cfg.lambda_ssim * sgrad * keep[..., None]
    else:
        terms["l1"] = 0.0
        terms["ssim"] = 0.0
    total = terms["l1"] + cfg.lambda_ssim * terms["ssim"]

    g_inv = np.zeros((H, W))
    terms["depth"] = 0.0
    wd = cfg.depth_weight(iteration)
    if sup.gt_inv_depth is not None and iteration >= cfg.depth_start_iter and wd > 0:
        m = (sup.valid & (sup.mask < 0.5)).astype(np.float64)
        dd = (out.inv_depth - sup.gt_inv_depth) * m
        terms["depth"] = float(np.abs(dd).sum() / (H * W))
        g_inv = wd * np.sign(dd) / (H * W)
        total += wd * terms["depth"]

    terms["opacity"], g_alpha = opacity_mask_loss(out.alpha, sup.mask)
    total += cfg.lambda_o * terms["opacity"]
    g_alpha = cfg.lambda_o * g_alpha

    g_scales = np.zeros_like(out.scales)
    terms["volume"] = 0.0
    if cfg.lambda_vol > 0 and len(out.scales):
        terms["volume"], gv = volume_loss(out.scales, out.visible)
        total += cfg.lambda_vol * terms["volume"]
        g_scales = cfg.lambda_vol * gv
    grads = {"rgb": g_rgb, "alpha": g_alpha, "inv_depth": g_inv}
    return LossResult(float(total), terms, {"render": grads, "scales": g_scales})


def normal_consistency(normal, depth, cam, mask=None):
    """Mean of 1 - n_render . n_depth over valid, unmasked pixels, with grads (normal, depth)."""
    n_d, aux = depth_to_normal(depth, cam, return_aux=True)
    valid = aux["valid"]
    if mask is not None:
        valid = valid & (mask < 0.5)
    cnt = valid.sum()
    if cnt == 0:
        return 0.0, np.zeros_like(normal), np.zeros_like(depth)
    dot = np.sum(normal * n_d, axis=-1)
    val = float(np.sum((1.0 - dot)[valid]) / cnt)
    v3 = valid[..., None]
    g_nr = np.where(v3, -n_d / cnt, 0.0)
    g_nd = np.where(v3, -normal / cnt, 0.0)
    g_depth = depth_to_normal_backward(depth, cam, g_nd, aux)
    return val, g_nr, g_depth


def loss_surface(out, sup: SupervisionBundle, cfg: LossConfig, iteration: int, cam=None) -> LossResult:
    mode = out.ctx.mode if out.ctx is not None else getattr(out, "mode", RenderMode.ELLIPSOID3D)
    if mode is not RenderMode.DISK2D:
        raise ModeMismatch("surface loss needs disk-mode renders (rendered normals)")
    res = loss_render(out, sup, cfg, iteration)
    res.terms["normal"] = 0.0
    if iteration >= cfg.normal_start_iter and cfg.lambda_n > 0:
        cam = cam if cam is not None else out.ctx.cam
        val, g_nr, g_depth = normal_consistency(out.normal, out.depth, cam, sup.mask)
        res.terms["normal"] = val
        res.total += cfg.lambda_n * val
        res.grads["render"]["normal"] = cfg.lambda_n * g_nr
        res.grads["render"]["depth"] = cfg.lambda_n * g_depth
    return res


# ---------------------------------------------------------------- metrics

def _metric_weights(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    keep = np.ones(a.shape[:2]) if mask is None else 1.0 - (np.asarray(mask) > 0.5)
    if keep.sum() == 0:
        raise AllMasked("every pixel is masked")
    return a, b, keep


def psnr(a, b, mask=None) -> float:
    """PSNR in dB over unmasked pixels; ``inf`` for identical inputs."""
    a, b, keep = _metric_weights(a, b, mask)
    w = keep[..., None] if a.ndim == 3 else keep
    C = a.shape[2] if a.ndim == 3 else 1
    mse = float(np.sum(((a - b) ** 2) * w) / (keep.sum() * C))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def psnr_tab(value: float, cap: float = 100.0) -> float:
    return min(value, cap)


def ssim(a, b, mask=None) -> float:
    a, b, keep = _metric_weights(a, b, mask)
    w = keep[..., None] if a.ndim == 3 else keep
    S, _ = _ssim_terms(a * w, b * w)
    C = a.shape[2] if a.ndim == 3 else 1
    return float(np.sum(S * w) / (keep.sum() * C))
