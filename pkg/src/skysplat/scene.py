"""Core scene types: cameras, anchors, decoded Gaussians, LOD config, chunks."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import EmptyPointCloud, EmptyScene, MixedHandedness


class ViewClass(enum.IntEnum):
    AERIAL = 0
    STREET = 1

    @classmethod
    def parse(cls, value) -> "ViewClass":
        if isinstance(value, ViewClass):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        return cls[str(value).strip().upper()]


class StageTag(enum.IntEnum):
    COARSE = 0
    FINE = 1


class RenderMode(enum.Enum):
    ELLIPSOID3D = "3d"
    DISK2D = "2d"

    @classmethod
    def parse(cls, value) -> "RenderMode":
        if isinstance(value, RenderMode):
            return value
        return cls(str(value).lower())


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose (OpenCV axes: x right, y down, z forward).

    Pixel centers sit at integer coordinates.
    """

    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    view_class: ViewClass = ViewClass.AERIAL
    appearance_id: int = 0
    name: str = ""
    image_path: Optional[str] = None
    depth_path: Optional[str] = None
    mask_path: Optional[str] = None

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.view_class = ViewClass.parse(self.view_class)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def is_aerial(self) -> bool:
        return self.view_class == ViewClass.AERIAL

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def project(self, pts: np.ndarray):
        """Return pixel coordinates (N,2) and camera depth (N,)."""
        pc = self.world_to_camera(np.atleast_2d(pts))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return uv, z

    def in_frustum(self, pts: np.ndarray, near: float = 0.2) -> np.ndarray:
        uv, z = self.project(pts)
        return (
            (z > near)
            & (uv[:, 0] >= -0.5)
            & (uv[:, 0] <= self.width - 0.5)
            & (uv[:, 1] >= -0.5)
            & (uv[:, 1] <= self.height - 0.5)
        )

    def pixel_rays(self) -> np.ndarray:
        """Camera-space ray directions with unit z, shape (H, W, 3)."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1)

    @staticmethod
    def look_at(eye, target, up=(0.0, 0.0, 1.0)):
        """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        if abs(fwd @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return R, -R @ eye

    def with_pose(self, R, t) -> "Camera":
        return replace(self, R=np.array(R), t=np.array(t))


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.full_like(self.positions, 0.5)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.positions)

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.positions[mask], self.colors[mask])

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        return PointCloud(
            np.concatenate([c.positions for c in clouds]), np.concatenate([c.colors for c in clouds])
        )


@dataclass
class LodConfig:
    K: int
    K_aerial: int
    r_d: float = 0.999
    base_voxel: float = 1.0
    level_distance_cutoffs: tuple = ()

    def __post_init__(self):
        if not (self.K >= self.K_aerial >= 1):
            raise ValueError(f"need K >= K_aerial >= 1, got K={self.K}, K_aerial={self.K_aerial}")
        if not 0.0 < self.r_d < 1.0:
            raise ValueError("r_d must lie in (0, 1)")
        if self.base_voxel <= 0:
            raise ValueError("base_voxel must be positive")
        cut = tuple(float(c) for c in self.level_distance_cutoffs)
        if cut:
            if len(cut) != self.K:
                raise ValueError("need one distance cutoff per level")
            if any(b >= a for a, b in zip(cut, cut[1:])):
                raise ValueError("distance cutoffs must strictly decrease with level")
        self.level_distance_cutoffs = cut

    def voxel_size(self, level) -> float:
        return self.base_voxel / (2.0 ** level)

    def with_cutoffs(self, d0: float) -> "LodConfig":
        return replace(self, level_distance_cutoffs=tuple(d0 / 2.0**l for l in range(self.K)))


@dataclass
class GaussianBatch:
    """Decoded neural Gaussians, one row per primitive.

    ``s`` has 3 columns in ellipsoid mode and 2 (tangential) in disk mode.
    ``color`` is RGB in [0, 1].
    """

    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    source_anchor: Optional[np.ndarray] = None
    level: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.mu)

    @staticmethod
    def empty(scale_dim=3) -> "GaussianBatch":
        return GaussianBatch(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, scale_dim)), np.zeros(0), np.zeros((0, 3)),
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
        )

    def take(self, idx) -> "GaussianBatch":
        def pick(a):
            return None if a is None else a[idx]

        return GaussianBatch(
            self.mu[idx], self.q[idx], self.s[idx], self.sigma[idx], self.color[idx],
            pick(self.source_anchor), pick(self.level),
        )


def voxel_keys(positions: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(positions / voxel).astype(np.int64)


@dataclass
class AnchorField:
    """Struct-of-arrays anchor set. Single writer; readers may share it."""

    lod: LodConfig
    positions: np.ndarray
    levels: np.ndarray
    features: np.ndarray
    log_scaling: np.ndarray
    offsets: np.ndarray
    stage: np.ndarray
    k: int = 10
    feature_dim: int = 32

    def __len__(self):
        return len(self.positions)

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.log_scaling)

    @staticmethod
    def empty(lod, k=10, feature_dim=32) -> "AnchorField":
        return AnchorField(
            lod, np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros((0, feature_dim)),
            np.zeros((0, 3)), np.zeros((0, k, 3)), np.zeros(0, dtype=np.uint8), k, feature_dim,
        )

    def count_per_level(self):
        return np.bincount(self.levels, minlength=self.lod.K)[: self.lod.K].tolist()

    def occupied(self, level: int) -> set:
        keys = voxel_keys(self.positions[self.levels == level], self.lod.voxel_size(level))
        return set(map(tuple, keys.tolist()))

    def append(self, positions, levels, stage, rng, features=None) -> np.ndarray:
        """Add anchors with fresh parameters; returns indices of the new rows."""
        n = len(positions)
        levels = np.asarray(levels, dtype=np.int64).reshape(n)
        vox = self.lod.base_voxel / 2.0 ** levels
        if features is None:
            features = np.zeros((n, self.feature_dim))
        start = len(self)
        self.positions = np.concatenate([self.positions, np.asarray(positions, dtype=np.float64).reshape(n, 3)])
        self.levels = np.concatenate([self.levels, levels])
        self.features = np.concatenate([self.features, features])
        self.log_scaling = np.concatenate([self.log_scaling, np.repeat(np.log(vox)[:, None], 3, axis=1)])
        self.offsets = np.concatenate([self.offsets, rng.uniform(-0.5, 0.5, size=(n, self.k, 3))])
        self.stage = np.concatenate([self.stage, np.full(n, int(stage), dtype=np.uint8)])
        return np.arange(start, start + n)

    def remove(self, mask) -> None:
        keep = ~np.asarray(mask, dtype=bool)
        for name in ("positions", "levels", "features", "log_scaling", "offsets", "stage"):
            setattr(self, name, getattr(self, name)[keep])

    def copy(self) -> "AnchorField":
        return AnchorField(
            self.lod, self.positions.copy(), self.levels.copy(), self.features.copy(),
            self.log_scaling.copy(), self.offsets.copy(), self.stage.copy(), self.k, self.feature_dim,
        )


@dataclass
class Chunk:
    core_bounds: tuple  # (xmin, ymin, xmax, ymax)
    expanded_bounds: tuple
    cameras: list
    seed_points: PointCloud
    grid_index: tuple

    def in_core(self, xy: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.core_bounds
        return (xy[:, 0] >= x0) & (xy[:, 0] < x1) & (xy[:, 1] >= y0) & (xy[:, 1] < y1)

    def in_expanded(self, xy: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.expanded_bounds
        return (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)


@dataclass
class ValidationReport:
    aerial: int
    street: int
    bounds: tuple
    violations: list = field(default_factory=list)
    ok: bool = True

    def as_dict(self):
        return {
            "aerial": self.aerial,
            "street": self.street,
            "bounds": list(self.bounds),
            "violations": list(self.violations),
            "ok": self.ok,
        }


def validate_scene(cameras, points=None, two_stage: bool = True) -> ValidationReport:
    if not cameras:
        raise EmptyScene("scene has no cameras")
    violations = []
    for cam in cameras:
        det = np.linalg.det(cam.R)
        if abs(det - 1.0) > 1e-6:
            raise MixedHandedness(f"camera {cam.id}: rotation determinant {det:.9g}")
        if np.abs(cam.R.T @ cam.R - np.eye(3)).max() > 1e-9:
            violations.append(f"camera {cam.id}: rotation not orthonormal")
        if cam.fx <= 0 or cam.fy <= 0:
            violations.append(f"camera {cam.id}: non-positive focal length")
        if cam.width <= 0 or cam.height <= 0:
            violations.append(f"camera {cam.id}: non-positive image size")
    n_aerial = sum(c.is_aerial for c in cameras)
    n_street = len(cameras) - n_aerial
    if two_stage and (n_aerial == 0 or n_street == 0):
        violations.append("two-stage training needs at least one aerial and one street camera")
    xy = [c.center[:2] for c in cameras]
    if points is not None and len(points):
        xy.extend(np.asarray(points.positions)[:, :2])
    xy = np.asarray(xy)
    bounds = (*xy.min(axis=0).tolist(), *xy.max(axis=0).tolist())
    return ValidationReport(n_aerial, n_street, bounds, violations, ok=not violations)


def init_anchors(points, lod: LodConfig, k: int = 10, feature_dim: int = 32, rng=None,
                 max_levels: Optional[int] = None, cap_ratio: float = 4.0) -> AnchorField:
    """Voxelize the point cloud at every LOD level; one anchor per occupied voxel.

    Levels whose inclusion would push the total above ``cap_ratio`` times the
    point count are dropped, finest first. ``max_levels`` restricts the field
    to levels below it (the rest can be materialized later).
    """
    pos = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    pos = pos.reshape(-1, 3)
    if len(pos) == 0:
        raise EmptyPointCloud("cannot initialize anchors from an empty point cloud")
    rng = np.random.default_rng(0) if rng is None else rng
    budget = cap_ratio * len(pos)
    chosen = []
    total = 0
    for level in range(lod.K):
        v = lod.voxel_size(level)
        keys = np.unique(voxel_keys(pos, v), axis=0)
        if total + len(keys) > budget and level > 0:
            break
        total += len(keys)
        chosen.append((level, (keys + 0.5) * v))
    if max_levels is not None:
        chosen = [(l, c) for l, c in chosen if l < max_levels]
    field_ = AnchorField.empty(lod, k, feature_dim)
    for level, centers in chosen:
        field_.append(centers, np.full(len(centers), level), StageTag.COARSE, rng)
    return field_


def anchor_candidates(points, lod: LodConfig, levels, cap_ratio: float = 4.0):
    """Voxel centers per level that :func:`init_anchors` would produce (after the cap)."""
    pos = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    out = {}
    total = 0
    for level in range(lod.K):
        v = lod.voxel_size(level)
        keys = np.unique(voxel_keys(pos, v), axis=0)
        if total + len(keys) > cap_ratio * len(pos) and level > 0:
            break
        total += len(keys)
        if level in levels:
            out[level] = (keys + 0.5) * v
    return out
