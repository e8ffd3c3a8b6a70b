from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import point_in_cell
from skysplat.errors import EmptyChunk, MissingChunkModel
from skysplat.largescale import (PartitionPlan, augment_chunk, backproject_depth, chunk_seed, merge, partition,
                                 train_chunks, visibility_fraction)
from skysplat.scene import Camera, PointCloud


def ground_cam(i, x, y, h=5.0, cls="aerial", size=16):
    R = np.diag([1.0, -1.0, -1.0])                  # straight down, exact center
    t = -R @ np.array([x, y, h], float)
    return Camera(i, 12.0, 12.0, (size - 1) / 2, (size - 1) / 2, R, t, size, size, cls)


def grid_points(n=9, half=2.0):
    g = np.linspace(-half, half, n)
    xx, yy = np.meshgrid(g, g)
    return PointCloud(np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], 1))


def test_single_cell_holds_everything():
    cams = [ground_cam(i, x, y) for i, (x, y) in enumerate([(0, 0), (1, 2), (-1, 1)])]
    pts = grid_points()
    plan = partition(cams, pts, 1, 1)
    assert len(plan.chunks) == 1
    ch = plan.chunks[0]
    x0, y0, x1, y1 = ch.expanded_bounds
    xy = pts.positions[:, :2]
    inside = (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
    assert len(ch.cameras) == 3 and len(ch.seed_points) == inside.sum() < len(pts)
    assert plan.owned(pts.positions[:, :2], (0, 0)).all()


def test_corner_cameras_one_per_chunk():
    cams = [ground_cam(i, x, y) for i, (x, y) in enumerate([(-2, -2), (2, -2), (-2, 2), (2, 2)])]
    plan = partition(cams, grid_points(), 2, 2, margin=0.0)
    assert sorted(len(c.cameras) for c in plan.chunks) == [1, 1, 1, 1]
    assert not plan.empty


def test_boundary_camera_joins_neighbours():
    cams = [ground_cam(i, x, y) for i, (x, y) in enumerate([(-2, -2), (2, 2), (0, 0)])]
    plan = partition(cams, grid_points(), 2, 2, margin=0.0)
    assert sum(any(c.id == 2 for c in ch.cameras) for ch in plan.chunks) == 4
    assert len(plan.cell_of(np.array([[0.0, 0.0]]))) == 1


def test_margin_grows_chunks():
    cams = [ground_cam(i, x, 0.0) for i, x in enumerate(np.linspace(-2, 2, 9))]
    tight = partition(cams, grid_points(), 2, 1, margin=0.0)
    loose = partition(cams, grid_points(), 2, 1, margin=1.0)
    for a, b in zip(tight.chunks, loose.chunks):
        assert {c.id for c in a.cameras} < {c.id for c in b.cameras}
        assert len(a.seed_points) < len(b.seed_points)


def test_partition_errors():
    with pytest.raises(EmptyChunk):
        partition([], grid_points(), 1, 1)
    with pytest.raises(ValueError):
        partition([ground_cam(0, 0, 0)], grid_points(), 0, 1)
    with pytest.raises(ValueError):
        partition([ground_cam(0, 0, 0)], grid_points(), 1, 1, visibility_threshold=0.0)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 4), n=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_cell_of_matches_oracle(m, n, seed):
    rng = np.random.default_rng(seed)
    cams = [ground_cam(i, *rng.uniform(-3, 3, 2)) for i in range(5)]
    plan = partition(cams, grid_points(), m, n, margin=0.5)
    xy = rng.uniform(-5, 5, (60, 2))
    xy[:5] = [c.center[:2] for c in cams]
    xmin, ymin, xmax, ymax = plan.bounds
    xe, ye = np.linspace(xmin, xmax, m + 1), np.linspace(ymin, ymax, n + 1)
    assert [tuple(c) for c in plan.cell_of(xy).tolist()] == [tuple(c) for c in point_in_cell(xy, xe, ye)]


def test_visibility_fraction_extremes():
    pts = grid_points(5, 0.5).positions
    down = ground_cam(0, 0.0, 0.0, h=5.0)
    R, t = Camera.look_at([0.0, 0.0, 5.0], [0.0, 0.01, 10.0])
    up = Camera(1, 12.0, 12.0, 7.5, 7.5, R, t, 16, 16)
    assert visibility_fraction(down, pts) == 1.0
    assert visibility_fraction(up, pts) == 0.0
    assert visibility_fraction(down, np.zeros((0, 3))) == 0.0


def test_augmentation_monotone_in_threshold(two_chunk):
    sc = two_chunk
    base = partition(sc.cameras, sc.points, 2, 1, margin=0.0)
    sizes = []
    for thr in (1.0, 0.5, 0.25, 0.05):
        aug = [augment_chunk(ch, sc.cameras, sc.points, sc.depths, None, thr) for ch in base.chunks]
        sizes.append([{c.id for c in ch.cameras} for ch in aug])
    for loose, tight in zip(sizes[1:], sizes):
        for a, b in zip(loose, tight):
            assert b <= a
    for aug, ch in zip(sizes[-1], base.chunks):
        assert {c.id for c in ch.cameras} <= aug
    assert any(len(a) > len(ch.cameras) for a, ch in zip(sizes[-1], base.chunks))


def test_augmentation_adds_street_depth_points(two_chunk):
    sc = two_chunk
    base = partition(sc.cameras, sc.points, 2, 1, margin=0.0)
    ch = base.chunks[0]
    aug = augment_chunk(ch, sc.cameras, sc.points, sc.depths, None, 1.0)
    assert len(aug.seed_points) > len(ch.seed_points)
    no_depth = augment_chunk(ch, sc.cameras, sc.points, {}, None, 1.0)
    assert len(no_depth.seed_points) == len(ch.seed_points)


def test_plane_back_projection():
    R, t = Camera.look_at([0.3, -0.2, 4.0], [0.5, 0.4, 0.0])
    cam = Camera(0, 30.0, 30.0, 15.5, 15.5, R, t, 32, 32)
    rays_w = cam.pixel_rays() @ cam.R                 # unit camera z, world frame
    depth = -cam.center[2] / rays_w[..., 2]           # camera depth of the z = 0 plane
    pts = backproject_depth(cam, depth, stride=3)
    assert len(pts) == len(range(0, 32, 3)) ** 2
    assert np.abs(pts.positions[:, 2]).max() < 1e-6


def test_chunk_seeds():
    assert chunk_seed(0, (0, 1)) == chunk_seed(0, (0, 1))
    seeds = {chunk_seed(7, (i, j)) for i in range(3) for j in range(3)}
    assert len(seeds) == 9 and chunk_seed(8, (0, 0)) != chunk_seed(7, (0, 0))


def test_merge_counts_match_core_oracle(two_chunk, two_chunk_results):
    plan = two_chunk.plan
    merged = merge(plan, two_chunk_results)
    xmin, ymin, xmax, ymax = plan.bounds
    m, n = plan.grid
    xe, ye = np.linspace(xmin, xmax, m + 1), np.linspace(ymin, ymax, n + 1)
    expect = 0
    for gi, res in two_chunk_results.items():
        assert res.ok, res.error
        expect += sum(tuple(c) == gi for c in point_in_cell(res.baked.mu[:, :2], xe, ye))
    assert len(merged) == expect
    owners = plan.cell_of(merged.mu[:, :2])
    assert len(np.unique(owners, axis=0)) == 2


def test_merge_requires_every_chunk(two_chunk, two_chunk_results):
    partial = {k: v for k, v in two_chunk_results.items() if k == (0, 0)}
    with pytest.raises(MissingChunkModel):
        merge(two_chunk.plan, partial)


def test_failed_chunk_is_isolated(two_chunk):
    sc = two_chunk
    only_b = {c.id for c in sc.plan.chunks[1].cameras} - {c.id for c in sc.plan.chunks[0].cameras}
    assert only_b
    sup = {k: v for k, v in sc.supervision.items() if k not in only_b}
    cfg = TrainConfigSmall(sc.config)
    seen = []
    res = train_chunks(sc.plan, sup, cfg, workers=1, lod=sc.lod, n_images=len(sc.cameras), on_done=seen.append)
    assert len(seen) == 2
    assert res[(1, 0)].error and not res[(1, 0)].ok
    assert res[(0, 0)].ok and len(res[(0, 0)].baked) > 0


def TrainConfigSmall(cfg):
    from skysplat.trainer import TrainConfig

    small = TrainConfig.desk(0.0005, base_voxel=cfg.base_voxel, k=cfg.k, feature_dim=cfg.feature_dim,
                             appearance_dim=cfg.appearance_dim)
    return replace(small, seed=cfg.seed)


def test_manifest_round_trip(two_chunk, tmp_path):
    plan = two_chunk.plan
    path = plan.to_manifest(tmp_path / "plan.json")
    back = PartitionPlan.from_manifest(path, two_chunk.cameras)
    assert back.grid == plan.grid and back.margin == plan.margin and back.bounds == plan.bounds
    for a, b in zip(plan.chunks, back.chunks):
        assert a.core_bounds == b.core_bounds and a.expanded_bounds == b.expanded_bounds
        assert [c.id for c in a.cameras] == [c.id for c in b.cameras]
        assert np.array_equal(a.seed_points.positions, b.seed_points.positions)
