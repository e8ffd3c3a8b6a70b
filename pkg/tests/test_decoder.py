import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import decoder_errors
from skysplat.decoder import (DecoderBank, bake_explicit, baked_to_gaussians, decode, decode_backward, fit_sh,
                              fibonacci_sphere, select_anchors, sh_basis)
from skysplat.errors import ContextMismatch
from skysplat.io.ply import read_baked_ply, write_baked_ply
from skysplat.optim import Adam
from skysplat.scene import AnchorField, Camera, LodConfig, RenderMode, StageTag


def field_with_levels(levels, positions=None, lod=None, k=4, F=6, seed=0):
    rng = np.random.default_rng(seed)
    levels = np.asarray(levels)
    lod = lod or LodConfig(K=int(levels.max()) + 1, K_aerial=1)
    f = AnchorField.empty(lod, k, F)
    pos = np.zeros((len(levels), 3)) if positions is None else np.asarray(positions, float)
    f.append(pos, levels, StageTag.COARSE, rng)
    f.features = rng.normal(size=f.features.shape)
    return f


def cam_at(x, y, z, app=0, target=(0.0, 0.0, 0.0)):
    R, t = Camera.look_at([x, y, z], target)
    return Camera(0, 20.0, 20.0, 15.5, 15.5, R, t, 32, 32, appearance_id=app)


def test_cutoff_table():
    lod = LodConfig(K=2, K_aerial=1, level_distance_cutoffs=(100.0, 10.0))
    f = field_with_levels([0, 1], lod=lod)
    assert sorted(f.levels[select_anchors(f, cam_at(0, 0, 5.0), 2)]) == [0, 1]
    assert sorted(f.levels[select_anchors(f, cam_at(0, 0, 50.0), 2)]) == [0]


def test_far_camera_only_level0():
    lod = LodConfig(K=3, K_aerial=1, level_distance_cutoffs=(40.0, 20.0, 10.0))
    f = field_with_levels([0, 1, 2, 2, 0], lod=lod)
    sel = select_anchors(f, cam_at(0, 0, 1e9), 3)
    assert set(f.levels[sel]) == {0}


def test_active_levels_one_caps_at_level0():
    lod = LodConfig(K=3, K_aerial=1, level_distance_cutoffs=(40.0, 20.0, 10.0))
    f = field_with_levels([0, 1, 2], lod=lod)
    assert f.levels[select_anchors(f, cam_at(0, 0, 1.0), 1)].tolist() == [0]
    with pytest.raises(ValueError):
        select_anchors(f, cam_at(0, 0, 1.0), 4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), dist=st.floats(0.5, 200.0))
def test_selection_monotone_in_active_levels(seed, dist):
    rng = np.random.default_rng(seed)
    lod = LodConfig(K=4, K_aerial=1).with_cutoffs(80.0)
    f = field_with_levels(rng.integers(0, 4, 30), rng.uniform(-5, 5, (30, 3)), lod)
    c = cam_at(dist, 0.0, 1.0)
    prev = set()
    for a in range(1, 5):
        cur = set(select_anchors(f, c, a).tolist())
        assert prev <= cur
        prev = cur


def test_zero_offsets_center_on_anchor():
    f = field_with_levels([0, 0], [[0, 0, 0], [1, 2, 3]])
    f.offsets[:] = 0.0
    bank = DecoderBank(f.feature_dim, f.k, rng=np.random.default_rng(1))
    g = decode(f, [0, 1], bank, cam_at(0, 0, 8), return_context=False)
    for a in (0, 1):
        np.testing.assert_array_equal(g.mu[g.source_anchor == a], np.tile(f.positions[a], (np.sum(g.source_anchor == a), 1)))


def test_zero_mlp_opacity_half():
    f = field_with_levels([0, 0, 0])
    bank = DecoderBank(f.feature_dim, f.k, zero=True)
    g = decode(f, [0, 1, 2], bank, cam_at(1, 2, 8), return_context=False)
    assert len(g) == 3 * f.k
    assert np.all(g.sigma == 0.5)
    np.testing.assert_allclose(g.q, np.tile([1.0, 0, 0, 0], (len(g), 1)), atol=1e-15)


def test_view_conditioning_never_moves_centers():
    f = field_with_levels([0])
    bank = DecoderBank(f.feature_dim, f.k, rng=np.random.default_rng(2))
    near = decode(f, [0], bank, cam_at(0, 0, 3), return_context=False)
    far = decode(f, [0], bank, cam_at(0, 0, 30), return_context=False)
    keep = np.intersect1d(np.arange(len(near)), np.arange(len(far)))
    if len(near) == len(far):
        np.testing.assert_array_equal(near.mu, far.mu)
    assert not np.array_equal(near.color[keep], far.color[keep]) or not np.array_equal(near.sigma, far.sigma)


def test_invariants_of_decoded_gaussians():
    rng = np.random.default_rng(4)
    f = field_with_levels(np.zeros(20, int), rng.uniform(-1, 1, (20, 3)))
    bank = DecoderBank(f.feature_dim, f.k, rng=rng)
    for mode in ("3d", "2d"):
        g = decode(f, np.arange(20), bank, cam_at(2, 1, 6), mode=mode, return_context=False)
        np.testing.assert_allclose(np.linalg.norm(g.q, axis=1), 1.0, atol=1e-9)
        assert np.all((g.sigma > 0.005) & (g.sigma <= 1)) and np.all(g.s > 0)
        assert g.s.shape[1] == (3 if mode == "3d" else 2)


def test_decode_deterministic():
    f = field_with_levels([0, 0], [[0, 0, 0], [0.5, 0, 0]])
    bank = DecoderBank(f.feature_dim, f.k, rng=np.random.default_rng(3))
    a = decode(f, [0, 1], bank, cam_at(1, 1, 5), return_context=False)
    b = decode(f, [0, 1], bank, cam_at(1, 1, 5), return_context=False)
    for name in ("mu", "q", "s", "sigma", "color"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_zero_upstream_zero_grads():
    f = field_with_levels([0, 0])
    bank = DecoderBank(f.feature_dim, f.k, n_images=2, rng=np.random.default_rng(0))
    g, ctx = decode(f, [0, 1], bank, cam_at(0, 1, 6))
    z = lambda a: np.zeros_like(a)  # noqa: E731
    out = decode_backward(ctx, bank, z(g.mu), z(g.q), z(g.s), z(g.sigma), z(g.color))
    assert all(not np.any(v) for v in out.values())


def test_context_mismatch():
    f = field_with_levels([0])
    bank = DecoderBank(f.feature_dim, f.k, rng=np.random.default_rng(0))
    g, ctx = decode(f, [0], bank, cam_at(0, 0, 6))
    with pytest.raises(ContextMismatch):
        decode_backward(ctx, bank, g.mu[:0], g.q, g.s, g.sigma, g.color)
    with pytest.raises(ContextMismatch):
        decode_backward(ctx, bank, g.mu, g.q, g.s, g.sigma, g.color, field_size=5)
    with pytest.raises(ContextMismatch):
        decode_backward(None, bank, g.mu, g.q, g.s, g.sigma, g.color)


@pytest.mark.parametrize("mode,n", [("3d", 1), ("2d", 1), ("3d", 3)])
def test_finite_differences(mode, n):
    errs = decoder_errors(5, mode, n)
    assert max(errs.values()) < 1e-4, errs


def test_frozen_anchor_unchanged_after_step():
    f = field_with_levels([0, 1], lod=LodConfig(K=2, K_aerial=1))
    f.stage[1] = StageTag.FINE
    bank = DecoderBank(f.feature_dim, f.k, rng=np.random.default_rng(0))
    bank.frozen = True
    g, ctx = decode(f, [0, 1], bank, cam_at(0, 0, 6))
    rng = np.random.default_rng(1)
    grads = decode_backward(ctx, bank, rng.normal(size=g.mu.shape), rng.normal(size=g.q.shape),
                            rng.normal(size=g.s.shape), rng.normal(size=g.sigma.shape), rng.normal(size=g.color.shape))
    before = {n: getattr(f, n).copy() for n in ("features", "offsets", "log_scaling")}
    opt = Adam()
    for n in before:
        opt.step(n, getattr(f, n), grads[n], 0.1, rows=f.stage == StageTag.FINE)
    for n, old in before.items():
        assert np.array_equal(getattr(f, n)[0], old[0])
        assert not np.array_equal(getattr(f, n)[1], old[1])
    assert all(not np.any(grads[k]) for k in bank.params())


def constant_color_bank(f, seed=0):
    bank = DecoderBank(f.feature_dim, f.k, rng=np.random.default_rng(seed))
    F = f.feature_dim
    bank.heads["color"].W1[F:F + 4] = 0.0  # direction and distance inputs
    return bank


def test_constant_color_bakes_to_dc_only():
    f = field_with_levels([0, 0, 0], np.eye(3))
    baked = bake_explicit(f, constant_color_bank(f))
    assert len(baked) > 0
    assert np.abs(baked.sh[:, 1:, :]).max() < 1e-9
    assert baked.residual.max() < 1e-9
    assert np.all(baked.sh[:, 0, :] >= 0)


def test_empty_field_bakes_empty():
    f = AnchorField.empty(LodConfig(K=1, K_aerial=1), 4, 6)
    assert len(bake_explicit(f, DecoderBank(6, 4, rng=np.random.default_rng(0)))) == 0


def test_bake_uses_downward_canonical_view():
    """Opacity and covariance match a decode from a camera straight above the anchor."""
    f = field_with_levels([0], [[0.3, -0.2, 0.1]])
    bank = DecoderBank(f.feature_dim, f.k, rng=np.random.default_rng(7))
    dist = 6.0
    baked = bake_explicit(f, bank, canonical_distance=dist)
    c = cam_at(0.3, -0.2, 0.1 + dist, target=(0.3, -0.2, 0.1))
    g = decode(f, [0], bank, c, return_context=False)
    np.testing.assert_allclose(baked.opacity, g.sigma, atol=1e-12)
    np.testing.assert_allclose(baked.s, g.s, atol=1e-12)
    np.testing.assert_allclose(baked.mu, g.mu, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_degree2_fit_beats_degree0(seed):
    rng = np.random.default_rng(seed)
    dirs = fibonacci_sphere(64)
    vals = rng.uniform(0, 1, (64, 3)) + 0.3 * dirs
    _, r2 = fit_sh(dirs, vals, 2)
    _, r0 = fit_sh(dirs, vals, 0)
    assert r2 <= r0 + 1e-15


def test_sh_basis_orthogonality():
    d = fibonacci_sphere(4096)
    B = sh_basis(d)
    gram = B.T @ B * (4 * np.pi / len(d))
    np.testing.assert_allclose(gram, np.eye(9), atol=5e-3)


def test_baked_render_colors_and_ply_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    lod = LodConfig(K=2, K_aerial=1).with_cutoffs(20.0)
    f = field_with_levels([0, 1, 1, 0], rng.uniform(-1, 1, (4, 3)), lod)
    bank = DecoderBank(f.feature_dim, f.k, rng=rng)
    baked = bake_explicit(f, bank)
    g = baked_to_gaussians(baked, cam_at(1, 2, 5))
    assert np.all((g.color >= 0) & (g.color <= 1))
    write_baked_ply(tmp_path / "b.ply", baked, lod)
    back, lod2 = read_baked_ply(tmp_path / "b.ply", with_lod=True)
    assert lod2 == lod and len(back) == len(baked)
    np.testing.assert_allclose(back.mu, baked.mu, atol=1e-6)
    np.testing.assert_allclose(back.sh, baked.sh, atol=1e-6)
    np.testing.assert_allclose(back.opacity, baked.opacity, rtol=1e-5)
    np.testing.assert_array_equal(back.level, baked.level)


def test_baked_ply_header_layout(tmp_path):
    f = field_with_levels([0])
    baked = bake_explicit(f, DecoderBank(f.feature_dim, f.k, rng=np.random.default_rng(0)), RenderMode.ELLIPSOID3D)
    write_baked_ply(tmp_path / "b.ply", baked)
    head = (tmp_path / "b.ply").read_bytes().split(b"end_header")[0].decode()
    props = [ln.split()[-1] for ln in head.splitlines() if ln.startswith("property")]
    expect = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"] + [f"f_rest_{i}" for i in range(24)]
              + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])
    assert props[:len(expect)] == expect
    assert "binary_little_endian" in head
