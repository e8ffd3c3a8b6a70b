"""Two-stage coarse-to-fine training: balanced view sampling, LOD construction,
significance-driven densification, pruning and stage transitions."""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .decoder import DecoderBank, decode, decode_backward, select_anchors
from .errors import DegenerateDistances, MissingClass, NonFiniteLoss
from .losses import LossConfig, SupervisionBundle, loss_render, loss_surface, psnr
from .optim import Adam, exp_decay
from .render import rasterize, rasterize_backward
from .scene import (AnchorField, Camera, LodConfig, PointCloud, RenderMode, StageTag, ViewClass,
                    anchor_candidates, init_anchors, voxel_keys)

log = logging.getLogger(__name__)

DESK_LR_SCALE = 4.0


@dataclass
class StageSchedule:
    stage1_iters: int = 60000
    stage2_iters: int = 40000
    densify_until_stage1: int = 30000
    densify_until_stage2: int = 20000
    densify_from: int = 1500
    densify_interval: int = 100
    R_stage1: float = 2.0
    R_stage2: float = 1.0
    tau_sigma: float = 0.2
    tau_g: float = 0.15
    offset_lr_factor_stage2: float = 0.1
    prune_opacity: float = 0.005

    def __post_init__(self):
        if self.densify_until_stage1 > self.stage1_iters or self.densify_until_stage2 > self.stage2_iters:
            raise ValueError("densification must stop within its stage")
        if self.R_stage1 < 0 or self.R_stage2 < 0:
            raise ValueError("R must be non-negative")

    @property
    def total_iters(self):
        return self.stage1_iters + self.stage2_iters

    def scaled(self, factor: float) -> "StageSchedule":
        """Shrink every iteration horizon by ``factor``; the window length N is kept."""
        def sc(v):
            return max(1, int(round(v * factor)))
        return replace(self, stage1_iters=sc(self.stage1_iters), stage2_iters=sc(self.stage2_iters),
                       densify_until_stage1=sc(self.densify_until_stage1),
                       densify_until_stage2=sc(self.densify_until_stage2), densify_from=sc(self.densify_from))


@dataclass
class LearningRates:
    offset_init: float = 0.01
    offset_final: float = 0.0001
    feature: float = 0.0075
    scaling: float = 0.007
    opacity_init: float = 0.002
    opacity_final: float = 0.00002
    cov_init: float = 0.004
    cov_final: float = 0.004
    color_init: float = 0.008
    color_final: float = 0.00005
    appearance_init: float = 0.05
    appearance_final: float = 0.0005

    def scaled(self, factor: float) -> "LearningRates":
        return LearningRates(**{f.name: getattr(self, f.name) * factor for f in fields(self)})


@dataclass
class TrainConfig:
    schedule: StageSchedule = field(default_factory=StageSchedule)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: LearningRates = field(default_factory=LearningRates)
    mode: str = "3d"
    seed: int = 0
    k: int = 10
    feature_dim: int = 32
    appearance_dim: int = 16
    base_voxel: float = 1.0
    r_d: float = 0.999
    single_stage: bool = False
    checkpoint_every: int = 0

    @staticmethod
    def desk(scale=0.01, lr_scale=DESK_LR_SCALE, **kw) -> "TrainConfig":
        """Schedule and loss gates shrunk by ``scale`` (600 + 400 iterations at 0.01).

        Short runs also take every learning rate times ``lr_scale``.
        """
        cfg = TrainConfig(**kw)
        cfg.schedule = cfg.schedule.scaled(scale)
        cfg.lr = cfg.lr.scaled(lr_scale)
        lc = cfg.loss
        cfg.loss = replace(lc, depth_start_iter=max(1, int(round(lc.depth_start_iter * scale))),
                           normal_start_iter=max(1, int(round(lc.normal_start_iter * scale))),
                           total_iters=cfg.schedule.total_iters)
        return cfg

    def __post_init__(self):
        self.loss = replace(self.loss, total_iters=self.schedule.total_iters)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        sched = StageSchedule(**d.pop("schedule", {}))
        loss = LossConfig(**d.pop("loss", {}))
        lr = LearningRates(**d.pop("lr", {}))
        known = {f.name for f in fields(TrainConfig)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return TrainConfig(schedule=sched, loss=loss, lr=lr, **d)


@dataclass
class TrainScene:
    cameras: list
    points: PointCloud
    supervision: dict            # camera id -> SupervisionBundle
    n_images: int = 0

    def __post_init__(self):
        if not self.n_images:
            self.n_images = max((c.appearance_id for c in self.cameras), default=-1) + 1


# ---------------------------------------------------------------- LOD

def lod_from_distances(aerial_d, street_d, r_d=0.999):
    """(K_aerial, K) from aerial/street distance samples.

    The K increment is clamped at zero when street views are not closer than
    the nearest aerial views.
    """
    aerial_d = np.asarray(aerial_d, dtype=np.float64)
    street_d = np.asarray(street_d, dtype=np.float64)
    if aerial_d.size == 0 or street_d.size == 0:
        raise DegenerateDistances("need aerial and street distances")
    D_a = float(np.quantile(aerial_d, r_d))
    d_a = float(np.quantile(aerial_d, 1 - r_d))
    d_s = float(np.quantile(street_d, 1 - r_d))
    return lod_levels(D_a, d_a, d_s)


def lod_levels(D_aerial, d_aerial, d_street):
    if d_aerial <= 0 or d_street <= 0 or D_aerial < d_aerial:
        raise DegenerateDistances(f"D_aerial={D_aerial}, d_aerial={d_aerial}, d_street={d_street}")
    K_aerial = int(math.floor(math.log2(D_aerial / d_aerial))) + 1
    K = K_aerial + max(0, int(math.floor(math.log2(d_aerial / d_street))))
    return K_aerial, K


def camera_point_distances(cam: Camera, points: PointCloud):
    pos = points.positions
    vis = cam.in_frustum(pos)
    return np.linalg.norm(pos[vis] - cam.center, axis=1)


def build_lod(cameras, points: PointCloud, r_d=0.999, base_voxel=1.0) -> LodConfig:
    if len(points) == 0:
        raise DegenerateDistances("empty point cloud")
    aerial = [camera_point_distances(c, points) for c in cameras if c.is_aerial]
    street = [camera_point_distances(c, points) for c in cameras if not c.is_aerial]
    if not aerial or not street:
        raise MissingClass("LOD construction needs aerial and street cameras")
    K_aerial, K = lod_from_distances(np.concatenate(aerial), np.concatenate(street), r_d)
    return LodConfig(K=K, K_aerial=K_aerial, r_d=r_d, base_voxel=base_voxel)


def lod_base_distance(cameras, field_: AnchorField, r_d=0.999):
    centers = np.array([c.center for c in cameras])
    d = np.linalg.norm(field_.positions[None, :, :] - centers[:, None, :], axis=2)
    return float(np.quantile(d, r_d))


# ---------------------------------------------------------------- sampling

def sample_view(cameras, R, rng) -> Camera:
    aerial = [c for c in cameras if c.is_aerial]
    street = [c for c in cameras if not c.is_aerial]
    p_aerial = R / (R + 1.0)
    u = rng.random()
    if u < p_aerial:
        if not aerial:
            raise MissingClass("no aerial cameras to sample")
        return aerial[rng.integers(len(aerial))]
    if not street:
        raise MissingClass("no street cameras to sample")
    return street[rng.integers(len(street))]


# ---------------------------------------------------------------- densification

@dataclass
class DensifyStats:
    grad_max: np.ndarray
    opacity_sum: np.ndarray
    count: np.ndarray
    radius_max: np.ndarray
    seen_slots: np.ndarray   # (N, k) slots that were visible in the window
    window: int = 0

    @staticmethod
    def zeros(n, k):
        return DensifyStats(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), np.zeros((n, k), dtype=bool))

    def resize(self, n):
        k = self.seen_slots.shape[1]
        grow = n - len(self.grad_max)
        if grow > 0:
            self.grad_max = np.concatenate([self.grad_max, np.zeros(grow)])
            self.opacity_sum = np.concatenate([self.opacity_sum, np.zeros(grow)])
            self.count = np.concatenate([self.count, np.zeros(grow)])
            self.radius_max = np.concatenate([self.radius_max, np.zeros(grow)])
            self.seen_slots = np.concatenate([self.seen_slots, np.zeros((grow, k), dtype=bool)])

    def keep(self, mask):
        for name in ("grad_max", "opacity_sum", "count", "radius_max", "seen_slots"):
            setattr(self, name, getattr(self, name)[mask])

    def reset(self):
        n, k = self.seen_slots.shape
        fresh = DensifyStats.zeros(n, k)
        self.__dict__.update(fresh.__dict__)

    @property
    def avg_opacity(self):
        return np.where(self.count > 0, self.opacity_sum / np.maximum(self.count, 1), 0.0)


def stats_contribute(view_class: ViewClass, stage: int, single_stage=False) -> bool:
    """Stage 1 accumulates from aerial views only, stage 2 from street views only."""
    if single_stage:
        return True
    return view_class == (ViewClass.AERIAL if stage == 1 else ViewClass.STREET)


def accumulate_stats(stats: DensifyStats, dctx, out, grads, cam: Camera, stage: int, single_stage=False,
                     anchor_positions=None):
    """Fold one completed forward/backward pass into the per-anchor window stats.

    Opacity is averaged over all k emitted opacities of each anchor whose
    position lies in the view frustum (all selected anchors when positions are
    not given).
    """
    if not stats_contribute(cam.view_class, stage, single_stage):
        return False
    k = dctx.op.shape[1]
    flat = np.nonzero(dctx.keep)[0]
    anchor_local = flat // k
    slot = flat % k
    vis = out.visible
    a_vis = dctx.anchor_idx[anchor_local[vis]]
    np.maximum.at(stats.grad_max, a_vis, grads.screen_grad[vis])
    np.maximum.at(stats.radius_max, a_vis, out.radius[vis])
    stats.seen_slots[a_vis, slot[vis]] = True
    # opacity over every emitted Gaussian (culled ones count as their raw value) of anchors in view
    if anchor_positions is None:
        frustum = np.ones(len(dctx.anchor_idx), dtype=bool)
    else:
        frustum = cam.in_frustum(anchor_positions)
    idx = dctx.anchor_idx[frustum]
    stats.opacity_sum[idx] += dctx.op[frustum].sum(axis=1)
    stats.count[idx] += k
    stats.window += 1
    return True


def significance(grad, radius, opacity, tau_sigma=0.2):
    return grad * radius * np.power(opacity, tau_sigma)


def significant_mask(stats: DensifyStats, tau_sigma=0.2, tau_g=0.15):
    score = significance(stats.grad_max, stats.radius_max, stats.avg_opacity, tau_sigma)
    return (score > tau_g) & (stats.count > 0)


def densify(field_: AnchorField, stats: DensifyStats, schedule: StageSchedule, stage: int, rng) -> np.ndarray:
    """Spawn anchors at the voxels of significant anchors' visible Gaussians.

    Stage 1 keeps the source level; stage 2 targets the next finer level.
    Returns indices of the new anchors.
    """
    sig = significant_mask(stats, schedule.tau_sigma, schedule.tau_g)
    src = np.nonzero(sig)[0]
    new_pos, new_lv = [], []
    if len(src):
        K = field_.lod.K
        mu = field_.positions[src, None, :] + field_.offsets[src] * field_.scaling[src, None, :]
        seen = stats.seen_slots[src]
        src_level = field_.levels[src]
        target = src_level if stage == 1 else np.minimum(src_level + 1, K - 1)
        cand = mu[seen]
        cand_level = np.repeat(target, seen.sum(axis=1))
        for level in np.unique(cand_level):
            v = field_.lod.voxel_size(level)
            keys = np.unique(voxel_keys(cand[cand_level == level], v), axis=0)
            occupied = field_.occupied(level)
            fresh = [kk for kk in map(tuple, keys.tolist()) if kk not in occupied]
            if fresh:
                new_pos.append((np.array(fresh, dtype=np.float64) + 0.5) * v)
                new_lv.append(np.full(len(fresh), level))
    stats.reset()
    if not new_pos:
        return np.zeros(0, dtype=np.int64)
    tag = StageTag.COARSE if stage == 1 else StageTag.FINE
    added = field_.append(np.concatenate(new_pos), np.concatenate(new_lv), tag, rng)
    stats.resize(len(field_))
    return added


def prune_mask(field_: AnchorField, stats: DensifyStats, stage: int, threshold=0.005) -> np.ndarray:
    """Anchors to remove: observed in the window with mean opacity below threshold.

    Coarse anchors are exempt in stage 2.
    """
    low = (stats.count > 0) & (stats.avg_opacity < threshold)
    if stage == 2:
        low &= field_.stage == StageTag.FINE
    return low


# ---------------------------------------------------------------- trainer

FIELD_GROUPS = ("features", "offsets", "log_scaling")


class Trainer:
    """Owns model, optimizer and RNG; a single writer over all parameters."""

    def __init__(self, scene: TrainScene, config: TrainConfig, lod: Optional[LodConfig] = None,
                 bank: Optional[DecoderBank] = None, appearance_init=None, densify=True):
        self.scene = scene
        self.cfg = config
        self.mode = RenderMode.parse(config.mode)
        self.rng = np.random.default_rng(config.seed)
        if lod is None:
            lod = build_lod(scene.cameras, scene.points, config.r_d, config.base_voxel)
        self.lod_initial = lod
        max_levels = None if config.single_stage else lod.K_aerial
        self.field = init_anchors(scene.points, lod, config.k, config.feature_dim, self.rng, max_levels=max_levels)
        if lod.level_distance_cutoffs:
            d0 = lod.level_distance_cutoffs[0]
        else:
            d0 = lod_base_distance(scene.cameras, self.field, lod.r_d)
            self.field.lod = lod.with_cutoffs(d0)
        if bank is None:
            bank = DecoderBank(config.feature_dim, config.k, scene.n_images, config.appearance_dim,
                               rng=self.rng, dist_scale=d0)
        else:
            bank = bank.copy()
            bank.dist_scale = d0
        if appearance_init is not None:
            bank.appearance = np.array(appearance_init, dtype=np.float64, copy=True)
        self.densify_enabled = densify
        aerial = [c.center for c in scene.cameras if c.is_aerial]
        if aerial:
            bank.bake_distance = float(np.median(np.linalg.norm(
                self.field.positions[None] - np.array(aerial)[:, None], axis=2)))
        self.bank = bank
        self.opt = Adam()
        self.stats = DensifyStats.zeros(len(self.field), config.k)
        self.iteration = 0
        self.stage = 1
        self.log = []
        self._transitioned = False

    # ---- schedule helpers
    @property
    def total_iters(self):
        return self.cfg.schedule.total_iters

    @property
    def active_levels(self):
        if self.cfg.single_stage or self.stage == 2:
            return self.field.lod.K
        return self.field.lod.K_aerial

    def _R(self):
        return self.cfg.schedule.R_stage1 if self.stage == 1 else self.cfg.schedule.R_stage2

    def _sample(self):
        if self.cfg.single_stage:
            cams = self.scene.cameras
            return cams[self.rng.integers(len(cams))]
        return sample_view(self.scene.cameras, self._R(), self.rng)

    def _lrs(self):
        lr = self.cfg.lr
        t, T = self.iteration, self.total_iters
        off = exp_decay(lr.offset_init, lr.offset_final, t, T)
        if self.stage == 2:
            off *= self.cfg.schedule.offset_lr_factor_stage2
        out = {"features": lr.feature, "offsets": off, "log_scaling": lr.scaling,
               "appearance": exp_decay(lr.appearance_init, lr.appearance_final, t, T)}
        for head, (a, b) in {"opacity": (lr.opacity_init, lr.opacity_final), "cov": (lr.cov_init, lr.cov_final),
                             "color": (lr.color_init, lr.color_final)}.items():
            v = exp_decay(a, b, t, T)
            for p in ("W1", "b1", "W2", "b2"):
                out[f"{head}.{p}"] = v
        return out

    # ---- one iteration
    def render_view(self, cam, appearance_id=None, active_levels=None):
        idx = select_anchors(self.field, cam, active_levels or self.active_levels)
        g, dctx = decode(self.field, idx, self.bank, cam, appearance_id, self.mode)
        out = rasterize(g, cam, self.mode)
        return out, g, dctx

    def step(self):
        sched = self.cfg.schedule
        if not self.cfg.single_stage and self.stage == 1 and self.iteration >= sched.stage1_iters:
            self.transition()
        cam = self._sample()
        sup = self.scene.supervision[cam.id]
        out, g, dctx = self.render_view(cam)
        if self.mode is RenderMode.DISK2D:
            res = loss_surface(out, sup, self.cfg.loss, self.iteration, cam)
        else:
            res = loss_render(out, sup, self.cfg.loss, self.iteration)
        if not np.isfinite(res.total):
            raise NonFiniteLoss(f"non-finite loss at iteration {self.iteration}",
                                snapshot={"iteration": self.iteration, "camera": cam.id, "terms": res.terms,
                                          "anchors": len(self.field)})
        gg = rasterize_backward(out.ctx, res.grads["render"])
        d_s = gg.s + res.grads["scales"]
        pg = decode_backward(dctx, self.bank, gg.mu, gg.q, d_s, gg.sigma, gg.color, len(self.field))
        self._apply(pg)
        accumulate_stats(self.stats, dctx, out, gg, cam, self.stage, self.cfg.single_stage,
                         self.field.positions[dctx.anchor_idx])
        entry = {"iter": self.iteration, "stage": self.stage, "camera": cam.id,
                 "view": cam.view_class.name.lower(), "loss": res.total,
                 **{k: float(v) for k, v in res.terms.items()}, "gaussians": len(g)}
        self.iteration += 1
        self._maybe_densify(entry)
        entry["anchors_per_level"] = self.field.count_per_level()
        self.log.append(entry)
        return res

    def _apply(self, pg):
        lrs = self._lrs()
        if self.stage == 2 and not self.cfg.single_stage:
            rows = self.field.stage == StageTag.FINE
        else:
            rows = None
        for name in FIELD_GROUPS:
            arr = getattr(self.field, name)
            self.opt.step(name, arr, pg[name], lrs[name], rows)
        if not self.bank.frozen:
            for name, arr in self.bank.params().items():
                self.opt.step(name, arr, pg[name], lrs[name])

    def _maybe_densify(self, entry):
        if not self.densify_enabled:
            return
        sched = self.cfg.schedule
        t = self.iteration
        if self.cfg.single_stage:
            local, until = t, sched.densify_until_stage1 + sched.densify_until_stage2
            start = sched.densify_from
        elif self.stage == 1:
            local, until, start = t, sched.densify_until_stage1, sched.densify_from
        else:
            local, until, start = t - sched.stage1_iters, sched.densify_until_stage2, 0
        if local <= start or local > until or local % sched.densify_interval:
            return
        stage = 1 if self.cfg.single_stage else self.stage
        n_before = len(self.field)
        sig = int(significant_mask(self.stats, sched.tau_sigma, sched.tau_g).sum())
        pmask = prune_mask(self.field, self.stats, stage, sched.prune_opacity)
        added = densify(self.field, self.stats, sched, stage, self.rng)
        for name in FIELD_GROUPS:
            self.opt.append_rows(name, len(added))
        pmask = np.concatenate([pmask, np.zeros(len(added), dtype=bool)])
        if pmask.any():
            self.field.remove(pmask)
            for name in FIELD_GROUPS:
                self.opt.keep_rows(name, ~pmask)
            self.stats.keep(~pmask)
        entry["densify"] = {"significant": sig, "added": int(len(added)), "pruned": int(pmask.sum()),
                            "before": n_before, "after": len(self.field)}

    def transition(self):
        """Freeze everything learned so far and open the fine levels."""
        if self._transitioned:
            return
        self._transitioned = True
        self.stage = 2
        self.field.stage[:] = StageTag.COARSE
        self.bank.frozen = True
        for name in list(self.opt.state):
            if name not in FIELD_GROUPS:
                self.opt.drop(name)
        lod = self.field.lod
        fine_levels = list(range(lod.K_aerial, lod.K))
        cands = anchor_candidates(self.scene.points, lod, fine_levels)
        for level, centers in sorted(cands.items()):
            occupied = self.field.occupied(level)
            keys = voxel_keys(centers, lod.voxel_size(level))
            fresh = np.array([tuple(kk) not in occupied for kk in keys.tolist()], dtype=bool)
            if fresh.any():
                self.field.append(centers[fresh], np.full(int(fresh.sum()), level), StageTag.FINE, self.rng)
        for name in FIELD_GROUPS:
            st = self.opt.state.get(name)
            if st is not None:
                self.opt.append_rows(name, len(self.field) - len(st["m"]))
        self.stats = DensifyStats.zeros(len(self.field), self.field.k)
        self.log.append({"event": "stage_transition", "iter": self.iteration,
                         "anchors_per_level": self.field.count_per_level()})

    def run(self, until=None, callback=None):
        until = self.total_iters if until is None else min(until, self.total_iters)
        every = self.cfg.checkpoint_every
        while self.iteration < until:
            self.step()
            if callback is not None:
                callback(self)
            if every and self.iteration % every == 0 and getattr(self, "checkpoint_dir", None):
                self.save_checkpoint(f"{self.checkpoint_dir}/ckpt_{self.iteration:06d}.npz")
        return self

    # ---- evaluation
    def evaluate(self, cameras, supervision):
        rows = []
        for cam in cameras:
            out, _, _ = self.render_view(cam)
            sup = supervision[cam.id]
            rows.append({"camera": cam.id, "name": cam.name, "view": cam.view_class.name.lower(),
                         "psnr": psnr(np.clip(out.rgb, 0, 1), sup.gt_rgb, sup.mask)})
        return rows

    # ---- checkpoints
    def state_arrays(self):
        f = self.field
        arr = {"field/positions": f.positions, "field/levels": f.levels, "field/features": f.features,
               "field/log_scaling": f.log_scaling, "field/offsets": f.offsets, "field/stage": f.stage}
        for name, a in self.bank.params().items():
            arr[f"bank/{name}"] = a
        for name, a in self.opt.state_arrays().items():
            arr[f"opt/{name}"] = a
        for name in ("grad_max", "opacity_sum", "count", "radius_max", "seen_slots"):
            arr[f"stats/{name}"] = getattr(self.stats, name)
        return arr

    def save_checkpoint(self, path):
        meta = {
            "iteration": self.iteration, "stage": self.stage, "transitioned": self._transitioned,
            "rng": self.rng.bit_generator.state, "lod": asdict(self.field.lod), "bank_frozen": self.bank.frozen,
            "dist_scale": self.bank.dist_scale, "bake_distance": self.bank.bake_distance,
            "stats_window": self.stats.window, "config": self.cfg.to_dict(), "log_len": len(self.log),
        }
        arrays = self.state_arrays()
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
        return path

    def load_checkpoint(self, path):
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
        lod = meta["lod"]
        lod["level_distance_cutoffs"] = tuple(lod["level_distance_cutoffs"])
        f = self.field
        f.lod = LodConfig(**lod)
        for name in ("positions", "levels", "features", "log_scaling", "offsets", "stage"):
            setattr(f, name, arrays[f"field/{name}"].copy())
        for name in self.bank.params():
            self.bank.set_param(name, arrays[f"bank/{name}"].copy())
        self.bank.frozen = meta["bank_frozen"]
        self.bank.dist_scale = meta["dist_scale"]
        self.bank.bake_distance = meta["bake_distance"]
        self.opt.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
        self.stats = DensifyStats(*(arrays[f"stats/{n}"].copy() for n in
                                    ("grad_max", "opacity_sum", "count", "radius_max", "seen_slots")),
                                  window=meta["stats_window"])
        self.iteration = meta["iteration"]
        self.stage = meta["stage"]
        self._transitioned = meta["transitioned"]
        self.rng.bit_generator.state = meta["rng"]
        return self


def train(scene: TrainScene, config: TrainConfig, lod=None, bank=None, callback=None) -> Trainer:
    return Trainer(scene, config, lod=lod, bank=bank).run(callback=callback)


def parameter_digest(field_: AnchorField, bank: DecoderBank, stage_tag=None) -> str:
    """SHA-256 over anchor rows (optionally only one stage tag) and, for Coarse, the bank."""
    import hashlib

    h = hashlib.sha256()
    rows = np.ones(len(field_), dtype=bool) if stage_tag is None else field_.stage == stage_tag
    order = np.lexsort(field_.positions[rows].T[::-1])
    for name in ("positions", "levels", "features", "log_scaling", "offsets"):
        h.update(np.ascontiguousarray(getattr(field_, name)[rows][order]).tobytes())
    if stage_tag is None or stage_tag == StageTag.COARSE:
        for name, arr in sorted(bank.params().items()):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
