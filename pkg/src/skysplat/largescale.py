"""Divide and conquer for large scenes: grid partition, chunk augmentation,
independent parallel chunk training and core-ownership merge."""
from __future__ import annotations

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from dataclasses import field as dc_field
from typing import Optional

import numpy as np

from .decoder import BakedGaussianSet, bake_explicit
from .errors import EmptyChunk, MissingChunkModel, MissingDepth, SkysplatError
from .scene import Camera, Chunk, PointCloud, ViewClass

log = logging.getLogger(__name__)

DEFAULT_VISIBILITY = 0.25
DEFAULT_MARGIN_FRACTION = 0.10
DEPTH_STRIDE = 8


@dataclass
class PartitionPlan:
    grid: tuple                      # (m, n): m cells along x, n along y
    margin: float
    bounds: tuple                    # camera ground rectangle (xmin, ymin, xmax, ymax)
    chunks: list
    visibility_threshold: float = DEFAULT_VISIBILITY
    empty: list = dc_field(default_factory=list)

    def cell_of(self, xy) -> np.ndarray:
        """(N, 2) integer cell index owning each ground point.

        Interior edges are half-open; outer cells extend to infinity so that
        every ground point has exactly one owner.
        """
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        m, n = self.grid
        xmin, ymin, xmax, ymax = self.bounds
        xe = np.linspace(xmin, xmax, m + 1)[1:-1]
        ye = np.linspace(ymin, ymax, n + 1)[1:-1]
        return np.stack([np.searchsorted(xe, xy[:, 0], side="right"),
                         np.searchsorted(ye, xy[:, 1], side="right")], axis=1)

    def owned(self, xy, grid_index) -> np.ndarray:
        c = self.cell_of(xy)
        return (c[:, 0] == grid_index[0]) & (c[:, 1] == grid_index[1])

    def chunk(self, grid_index) -> Chunk:
        for c in self.chunks:
            if tuple(c.grid_index) == tuple(grid_index):
                return c
        raise KeyError(grid_index)

    def to_manifest(self, path, point_dir=None):
        """JSON manifest with per-chunk camera ids, bounds and seed-point PLY paths."""
        from .io.ply import write_points_ply

        root = os.path.dirname(os.path.abspath(path))
        point_dir = point_dir or os.path.join(root, "chunk_points")
        os.makedirs(point_dir, exist_ok=True)
        chunks = []
        for c in self.chunks:
            r, col = c.grid_index
            ply = os.path.join(point_dir, f"chunk_{r}_{col}.ply")
            write_points_ply(ply, c.seed_points)
            chunks.append({"grid_index": [r, col], "core_bounds": list(c.core_bounds),
                           "expanded_bounds": list(c.expanded_bounds), "camera_ids": [cam.id for cam in c.cameras],
                           "seed_points": os.path.relpath(ply, root)})
        doc = {"grid": list(self.grid), "margin": self.margin, "bounds": list(self.bounds),
               "visibility_threshold": self.visibility_threshold, "empty": [list(e) for e in self.empty],
               "chunks": chunks}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
        return path

    @staticmethod
    def from_manifest(path, cameras) -> "PartitionPlan":
        from .io.ply import read_points_ply

        with open(path) as fh:
            doc = json.load(fh)
        root = os.path.dirname(os.path.abspath(path))
        by_id = {c.id: c for c in cameras}
        chunks = []
        for c in doc["chunks"]:
            cams = [by_id[i] for i in c["camera_ids"]]
            pts = read_points_ply(os.path.join(root, c["seed_points"]))
            chunks.append(Chunk(tuple(c["core_bounds"]), tuple(c["expanded_bounds"]), cams, pts,
                                tuple(c["grid_index"])))
        return PartitionPlan(tuple(doc["grid"]), doc["margin"], tuple(doc["bounds"]), chunks,
                             doc["visibility_threshold"], [tuple(e) for e in doc["empty"]])


def ground_xy(cameras) -> np.ndarray:
    return np.array([c.center[:2] for c in cameras]).reshape(-1, 2)


def partition(cameras, points: PointCloud, m: int, n: int, margin: Optional[float] = None,
              visibility_threshold: float = DEFAULT_VISIBILITY) -> PartitionPlan:
    if m < 1 or n < 1:
        raise ValueError("need m, n >= 1")
    if not 0 < visibility_threshold <= 1:
        raise ValueError("visibility_threshold must lie in (0, 1]")
    xy = ground_xy(cameras)
    if len(xy) == 0:
        raise EmptyChunk("no cameras to partition")
    xmin, ymin = xy.min(axis=0)
    xmax, ymax = xy.max(axis=0)
    xe = np.linspace(xmin, xmax, m + 1)
    ye = np.linspace(ymin, ymax, n + 1)
    if margin is None:
        margin = DEFAULT_MARGIN_FRACTION * float(np.hypot(xe[1] - xe[0], ye[1] - ye[0]))
    pxy = points.positions[:, :2]
    chunks, empty = [], []
    for i in range(m):
        for j in range(n):
            core = (float(xe[i]), float(ye[j]), float(xe[i + 1]), float(ye[j + 1]))
            exp = (core[0] - margin, core[1] - margin, core[2] + margin, core[3] + margin)
            inside = (xy[:, 0] >= exp[0]) & (xy[:, 0] <= exp[2]) & (xy[:, 1] >= exp[1]) & (xy[:, 1] <= exp[3])
            cams = [c for c, ok in zip(cameras, inside) if ok]
            pin = (pxy[:, 0] >= exp[0]) & (pxy[:, 0] <= exp[2]) & (pxy[:, 1] >= exp[1]) & (pxy[:, 1] <= exp[3])
            chunk = Chunk(core, exp, cams, points.subset(pin), (i, j))
            if not cams:
                log.warning("chunk %s has no cameras", (i, j))
                empty.append((i, j))
            chunks.append(chunk)
    return PartitionPlan((m, n), float(margin), (float(xmin), float(ymin), float(xmax), float(ymax)), chunks,
                         visibility_threshold, empty)


def visibility_fraction(cam: Camera, points: np.ndarray) -> float:
    if len(points) == 0:
        return 0.0
    return float(cam.in_frustum(points).mean())


def backproject_depth(cam: Camera, depth, rgb=None, stride=DEPTH_STRIDE) -> PointCloud:
    """World points from every ``stride``-th pixel with positive depth."""
    ys, xs = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
    d = depth[ys, xs]
    ok = d > 0
    xs, ys, d = xs[ok], ys[ok], d[ok]
    pc = np.stack([(xs - cam.cx) / cam.fx * d, (ys - cam.cy) / cam.fy * d, d], axis=1)
    world = (pc - cam.t) @ cam.R
    col = rgb[ys, xs] if rgb is not None else np.full((len(world), 3), 0.5)
    return PointCloud(world, col)


def augment_chunk(chunk: Chunk, all_cameras, all_points: PointCloud, depth_maps: dict, images: dict = None,
                  visibility_threshold: float = DEFAULT_VISIBILITY, stride: int = DEPTH_STRIDE) -> Chunk:
    """Add outside aerial cameras that see enough of the chunk, and street-depth seed points."""
    images = images or {}
    member = {c.id for c in chunk.cameras}
    seeds = chunk.seed_points.positions
    cams = list(chunk.cameras)
    for cam in all_cameras:
        if cam.id in member or not cam.is_aerial:
            continue
        if len(seeds) and visibility_fraction(cam, seeds) >= visibility_threshold:
            cams.append(cam)
    extra = [chunk.seed_points]
    for cam in chunk.cameras:
        if cam.is_aerial:
            continue
        depth = depth_maps.get(cam.id)
        if depth is None:
            log.warning("%s", MissingDepth(f"street camera {cam.name or cam.id} has no depth map; skipped"))
            continue
        pts = backproject_depth(cam, depth, images.get(cam.id), stride)
        lo, hi = chunk.expanded_bounds[:2], chunk.expanded_bounds[2:]
        ok = np.all((pts.positions[:, :2] >= lo) & (pts.positions[:, :2] <= hi), axis=1)
        extra.append(pts.subset(ok))
    cams.sort(key=lambda c: c.id)
    return replace(chunk, cameras=cams, seed_points=PointCloud.concat(extra))


# ---------------------------------------------------------------- training


def chunk_seed(global_seed: int, grid_index) -> int:
    return int(np.random.SeedSequence([int(global_seed), *map(int, grid_index)]).generate_state(1, np.uint64)[0])


@dataclass
class ChunkResult:
    grid_index: tuple
    field: object = None
    bank: object = None
    baked: Optional[BakedGaussianSet] = None
    error: Optional[str] = None
    log_tail: list = dc_field(default_factory=list)

    @property
    def ok(self):
        return self.error is None


def _train_one(job):
    from .trainer import TrainScene, Trainer

    grid_index, chunk, supervision, n_images, cfg, lod, appearance = job
    try:
        scene = TrainScene(chunk.cameras, chunk.seed_points, {c.id: supervision[c.id] for c in chunk.cameras},
                           n_images)
        tr = Trainer(scene, cfg, lod=lod, appearance_init=appearance)
        tr.run()
        baked = bake_explicit(tr.field, tr.bank, tr.mode)
        tail = [e for e in tr.log[-5:]]
        return ChunkResult(grid_index, tr.field, tr.bank, baked, None, tail)
    except SkysplatError as exc:
        return ChunkResult(grid_index, error=f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # isolate anything a chunk throws
        return ChunkResult(grid_index, error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")


def warm_start_appearance(cameras, points, supervision, cfg, lod, iters=None, n_images=None):
    """Appearance table from a short densification-free run on the whole scene."""
    from .trainer import TrainScene, Trainer

    scene = TrainScene(cameras, points, supervision, n_images or 0)
    tr = Trainer(scene, cfg, lod=lod, densify=False)
    tr.run(until=iters if iters is not None else max(1, cfg.schedule.stage1_iters // 10))
    return tr.bank.appearance.copy()


def train_chunks(plan: PartitionPlan, supervision: dict, config, workers: int = 1, lod=None,
                 appearance=None, n_images=None, on_done=None) -> dict:
    """Train every non-empty chunk independently; returns {grid_index: ChunkResult}.

    Each chunk gets its own seed derived from the global seed and its grid
    index, so results do not depend on ``workers``.
    """
    env = os.environ.get("SKYSPLAT_WORKERS")
    if env:
        workers = int(env)
    jobs = []
    for ch in plan.chunks:
        if not ch.cameras:
            continue
        cfg = replace(config, seed=chunk_seed(config.seed, ch.grid_index))
        jobs.append((tuple(ch.grid_index), ch, supervision, n_images or 0, cfg, lod, appearance))
    results = {}
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            res = _train_one(job)
            results[res.grid_index] = res
            if on_done:
                on_done(res)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_train_one, jobs):
                results[res.grid_index] = res
                if on_done:
                    on_done(res)
    for gi, res in results.items():
        if not res.ok:
            log.error("chunk %s failed: %s", gi, res.error.splitlines()[0])
    return results


def merge(plan: PartitionPlan, chunk_models: dict, appearance=None) -> BakedGaussianSet:
    """Keep each chunk's baked Gaussians whose center lies in its own core; concatenate."""
    parts = []
    for ch in plan.chunks:
        if not ch.cameras:
            continue
        gi = tuple(ch.grid_index)
        model = chunk_models.get(gi)
        baked = getattr(model, "baked", model)
        if baked is None:
            raise MissingChunkModel(f"no trained model for chunk {gi}")
        parts.append(baked.take(np.nonzero(plan.owned(baked.mu[:, :2], gi))[0]))
    merged = BakedGaussianSet.concat(parts)
    if appearance is not None:
        merged.appearance = np.array(appearance)
    return merged
