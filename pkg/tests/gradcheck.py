"""Finite-difference harnesses shared by the unit and acceptance suites.

Each function returns ``{name: relative_error}`` where the error of a
parameter block is max |analytic - numeric| / max |numeric| (floored).
"""
import numpy as np

from conftest import pinhole, random_gaussians
from oracles import central_fd, rel_err
from skysplat.decoder import DecoderBank, decode, decode_backward
from skysplat.losses import (LossConfig, SupervisionBundle, loss_render, loss_surface, normal_consistency,
                             opacity_mask_loss, ssim_map_and_grad, volume_loss)
from skysplat.render import rasterize, rasterize_backward
from skysplat.scene import AnchorField, Camera, LodConfig, StageTag

EPS = 1e-5


def rasterizer_errors(seed, mode, n=5, size=16):
    rng = np.random.default_rng(seed)
    cam = pinhole(size, size, 20.0)
    g = random_gaussians(rng, n, mode, depth=(4.0, 7.0), spread=1.5, scale=(0.2, 0.6))
    return batch_errors(g, cam, mode, rng)


def batch_errors(g, cam, mode, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    H, W = cam.height, cam.width
    w = {"rgb": rng.normal(size=(H, W, 3)), "alpha": rng.normal(size=(H, W)),
         "depth": rng.normal(size=(H, W)), "inv_depth": rng.normal(size=(H, W))}
    if mode == "2d":
        w["normal"] = rng.normal(size=(H, W, 3))

    def loss():
        o = rasterize(g, cam, mode)
        return sum(float(np.sum(getattr(o, k) * v)) for k, v in w.items())

    out = rasterize(g, cam, mode)
    gr = rasterize_backward(out.ctx, w)
    errs = {}
    for name in ("mu", "q", "s", "sigma", "color"):
        num = central_fd(loss, getattr(g, name), EPS)
        errs[name] = rel_err(getattr(gr, name), num)
    return errs


def _toy_field(rng, n_anchors=1, k=3, F=4):
    lod = LodConfig(K=1, K_aerial=1, base_voxel=0.5)
    field_ = AnchorField.empty(lod, k, F)
    field_.append(rng.uniform(-0.3, 0.3, (n_anchors, 3)), np.zeros(n_anchors), StageTag.COARSE, rng)
    field_.features = rng.normal(size=(n_anchors, F))
    field_.log_scaling = np.log(rng.uniform(0.3, 0.6, (n_anchors, 3)))
    return field_


def decoder_errors(seed, mode="3d", n_anchors=1):
    rng = np.random.default_rng(seed)
    field_ = _toy_field(rng, n_anchors)
    bank = DecoderBank(field_.feature_dim, field_.k, n_images=2, appearance_dim=3, hidden=5, rng=rng, dist_scale=5.0)
    bank.appearance = rng.normal(size=bank.appearance.shape)
    R, t = Camera.look_at([0.4, -0.3, 5.0], [0, 0, 0])
    cam = Camera(0, 20.0, 20.0, 7.5, 7.5, R, t, 16, 16, appearance_id=1)
    g0 = decode(field_, np.arange(n_anchors), bank, cam, mode=mode, return_context=False)
    sd = g0.s.shape[1]
    rows = len(g0)
    w = {"mu": rng.normal(size=(rows, 3)), "q": rng.normal(size=(rows, 4)), "s": rng.normal(size=(rows, sd)),
         "sigma": rng.normal(size=rows), "color": rng.normal(size=(rows, 3))}

    def loss():
        g = decode(field_, np.arange(n_anchors), bank, cam, mode=mode, return_context=False)
        assert len(g) == rows
        return sum(float(np.sum(getattr(g, k) * v)) for k, v in w.items())

    _, ctx = decode(field_, np.arange(n_anchors), bank, cam, mode=mode)
    an = decode_backward(ctx, bank, w["mu"], w["q"], w["s"], w["sigma"], w["color"])
    errs = {}
    for name in ("features", "offsets", "log_scaling"):
        errs[name] = rel_err(an[name], central_fd(loss, getattr(field_, name), EPS))
    for name, arr in bank.params().items():
        errs[name] = rel_err(an[name], central_fd(loss, arr, EPS))
    return errs


class _FakeOut:
    """Just the buffers the loss functions read."""

    def __init__(self, rgb, alpha, depth, inv_depth, normal, scales, visible, ctx=None):
        self.rgb, self.alpha, self.depth, self.inv_depth = rgb, alpha, depth, inv_depth
        self.normal, self.scales, self.visible, self.ctx = normal, scales, visible, ctx


def loss_term_errors(seed, size=8):
    """Each loss term separately, against its own finite differences."""
    rng = np.random.default_rng(seed)
    H = W = size
    x = rng.uniform(0.05, 0.95, (H, W, 3))
    y = rng.uniform(0.05, 0.95, (H, W, 3))
    mask = (rng.random((H, W)) < 0.3).astype(float)
    errs = {}

    # SSIM
    wts = 1.0 - mask
    _, g = ssim_map_and_grad(x, y, wts)
    errs["ssim"] = rel_err(g, central_fd(lambda: ssim_map_and_grad(x, y, wts)[0], x, EPS))

    # opacity regularizer
    a = rng.uniform(0.05, 0.95, (H, W))
    _, g = opacity_mask_loss(a, mask)
    errs["opacity"] = rel_err(g, central_fd(lambda: opacity_mask_loss(a, mask)[0], a, EPS))

    # volume
    s = rng.uniform(0.1, 1.0, (6, 3))
    vis = np.array([True, False, True, True, False, True])
    _, g = volume_loss(s, vis)
    errs["volume"] = rel_err(g, central_fd(lambda: volume_loss(s, vis)[0], s, EPS))

    # full render loss w.r.t. rgb, alpha and inverse depth (L1 and depth terms are piecewise linear)
    gt_inv = rng.uniform(0.1, 0.5, (H, W))
    sup = SupervisionBundle(y, gt_inv, mask)
    inv = gt_inv + rng.choice([-1, 1], (H, W)) * rng.uniform(0.02, 0.05, (H, W))
    cfg = LossConfig(total_iters=100, depth_start_iter=0)
    out = _FakeOut(x, a, 1.0 / inv, inv, np.zeros((H, W, 3)), s, vis)
    res = loss_render(out, sup, cfg, iteration=10)
    for key, arr in (("rgb", x), ("alpha", a), ("inv_depth", inv)):
        num = central_fd(lambda: loss_render(out, sup, cfg, 10).total, arr, 1e-7)
        errs[f"render.{key}"] = rel_err(res.grads["render"][key], num)
    num = central_fd(lambda: loss_render(out, sup, cfg, 10).total, s, EPS)
    errs["render.scales"] = rel_err(res.grads["scales"], num)

    # normal consistency w.r.t. rendered normal and depth
    cam = Camera(0, 10.0, 10.0, (W - 1) / 2, (H - 1) / 2, np.eye(3), np.zeros(3), W, H)
    depth = rng.uniform(2.0, 3.0, (H, W))
    nr = rng.normal(size=(H, W, 3))
    nr /= np.linalg.norm(nr, axis=-1, keepdims=True)
    _, g_n, g_d = normal_consistency(nr, depth, cam, mask)
    errs["normal.n"] = rel_err(g_n, central_fd(lambda: normal_consistency(nr, depth, cam, mask)[0], nr, EPS))
    errs["normal.depth"] = rel_err(g_d, central_fd(lambda: normal_consistency(nr, depth, cam, mask)[0], depth, EPS))
    return errs


def surface_loss_errors(seed, size=12):
    """loss_surface through a real disk-mode render, gradients on Gaussian parameters."""
    rng = np.random.default_rng(seed)
    cam = pinhole(size, size, 14.0)
    g = random_gaussians(rng, 6, "2d", depth=(4.0, 6.0), spread=1.0, scale=(0.5, 1.0))
    g.q = np.tile([1.0, 0.0, 0.0, 0.0], (len(g), 1)) + 0.3 * rng.normal(size=(len(g), 4))
    gt = rng.uniform(0.2, 0.8, (size, size, 3))
    sup = SupervisionBundle(gt, None, None)
    cfg = LossConfig(total_iters=10, normal_start_iter=0, lambda_ssim=0.0, lambda_vol=0.0, lambda_o=0.0)

    def loss():
        o = rasterize(g, cam, "2d")
        return loss_surface(o, sup, cfg, 5, cam).terms["normal"] * cfg.lambda_n

    out = rasterize(g, cam, "2d")
    res = loss_surface(out, sup, cfg, 5, cam)
    gr = {k: v for k, v in res.grads["render"].items() if k in ("normal", "depth")}
    grads = rasterize_backward(out.ctx, gr)
    return {name: rel_err(getattr(grads, name), central_fd(loss, getattr(g, name), EPS)) for name in ("mu", "q", "s")}
