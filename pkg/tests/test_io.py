import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skysplat.errors import ClassTagMissing, ParseError
from skysplat.io.config import load_config, split_sections
from skysplat.io.dataset import (align_depth, holdout_indices, load_dataset, parse_manifest, read_colmap_cameras,
                                 read_colmap_images, save_manifest, write_colmap_text)
from skysplat.io.images import read_depth, read_pfm, write_depth_png16, write_pfm
from skysplat.io.ply import read_points_ply, write_points_ply
from skysplat.scene import Camera, PointCloud


def two_cams():
    out = []
    for i, (eye, cls) in enumerate((([1.0, 2.0, 8.0], "aerial"), ([0.5, -3.0, 1.2], "street"))):
        R, t = Camera.look_at(eye, [0.2, 0.1, 0.0])
        out.append(Camera(i, 50.0 + i, 49.0, 31.5, 23.5, R, t, 64, 48, cls, name=f"img_{i}"))
    return out


def test_manifest_round_trip(tmp_path):
    cams = two_cams()
    path = save_manifest(tmp_path / "m.json", cams)
    back, test, *_ = parse_manifest(path)
    assert len(back) == 2 and test == [0]
    for a, b in zip(cams, back):
        assert a.name == b.name and a.view_class == b.view_class
        assert np.abs(a.R - b.R).max() < 1e-12 and np.abs(a.t - b.t).max() < 1e-12
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
    again, *_ = parse_manifest(save_manifest(tmp_path / "m2.json", back))
    for a, b in zip(back, again):
        assert np.abs(a.R - b.R).max() < 1e-12 and np.abs(a.t - b.t).max() < 1e-12


def test_missing_class_tag(tmp_path):
    path = save_manifest(tmp_path / "m.json", two_cams())
    doc = json.loads(open(path).read())
    del doc["frames"][1]["class"]
    (tmp_path / "bad.json").write_text(json.dumps(doc, indent=1))
    with pytest.raises(ClassTagMissing):
        parse_manifest(tmp_path / "bad.json")


def test_parse_error_carries_line(tmp_path):
    (tmp_path / "bad.json").write_text('{\n  "frames": [\n    {"name": "a",\n  ]\n}\n')
    with pytest.raises(ParseError) as exc:
        parse_manifest(tmp_path / "bad.json")
    assert exc.value.line == 4


def test_missing_file_is_reported(tmp_path):
    cams = two_cams()
    cams[0].image_path = str(tmp_path / "nope.png")
    path = save_manifest(tmp_path / "m.json", cams)
    with pytest.raises(ParseError):
        load_dataset(path)


def test_colmap_round_trip(tmp_path):
    cams = two_cams()
    pts = PointCloud(np.array([[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]), np.array([[1.0, 0.0, 0.0], [0.0, 0.5, 1.0]]))
    write_colmap_text(tmp_path / "sparse", cams, pts)
    intr = read_colmap_cameras(tmp_path / "sparse" / "cameras.txt")
    imgs = read_colmap_images(tmp_path / "sparse" / "images.txt")
    assert [im["name"] for im in imgs] == ["img_0", "img_1"]
    for c, im in zip(cams, imgs):
        k = intr[im["camera_id"]]
        assert (k["fx"], k["fy"], k["cx"], k["cy"]) == (c.fx, c.fy, c.cx, c.cy)
        assert np.abs(im["R"] - c.R).max() < 1e-12 and np.abs(im["t"] - c.t).max() < 1e-12
    doc = {"colmap": "sparse", "classes": {"img_0": "aerial", "img_1": "street"}}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    back, *_ = parse_manifest(tmp_path / "c.json")
    assert [c.view_class for c in back] == [c.view_class for c in cams]
    doc["classes"].pop("img_1")
    (tmp_path / "c2.json").write_text(json.dumps(doc))
    with pytest.raises(ClassTagMissing):
        parse_manifest(tmp_path / "c2.json")


def test_colmap_parse_error_line(tmp_path):
    d = tmp_path / "sparse"
    d.mkdir()
    (d / "cameras.txt").write_text("# comment\n1 PINHOLE 64 48 50 50 32 24\n2 PINHOLE 64 x 50 50 32 24\n")
    with pytest.raises(ParseError) as exc:
        read_colmap_cameras(d / "cameras.txt")
    assert exc.value.line == 3


def synthetic_alignment(tmp_true):
    R, t = Camera.look_at([0.0, 0.0, 6.0], [0.0, 0.01, 0.0])
    cam = Camera(0, 40.0, 40.0, 31.5, 31.5, R, t, 64, 64)
    rng = np.random.default_rng(0)
    pts = np.stack([rng.uniform(-2, 2, 200), rng.uniform(-2, 2, 200), rng.uniform(-1, 1, 200)], 1)
    uv, z = cam.project(pts)
    px = np.round(uv).astype(int)
    _, first = np.unique(px[:, 1] * 64 + px[:, 0], return_index=True)   # one SfM point per pixel
    pts, px, z = pts[first], px[first], z[first]
    raw = np.zeros((64, 64))
    raw[px[:, 1], px[:, 0]] = tmp_true(z)
    return raw, cam, pts


def test_alignment_recovers_depth_affine():
    raw, cam, pts = synthetic_alignment(lambda z: (z - 1.0) / 2.0)   # true depth = 2 raw + 1
    s, o = align_depth(raw, cam, pts, space="depth")
    assert abs(s - 2.0) < 1e-6 and abs(o - 1.0) < 1e-6


def test_alignment_in_inverse_depth():
    raw, cam, pts = synthetic_alignment(lambda z: (1.0 / z - 0.05) / 0.5)
    s, o = align_depth(raw, cam, pts)
    assert abs(s - 0.5) < 1e-6 and abs(o - 0.05) < 1e-6


def test_alignment_needs_points():
    R, t = Camera.look_at([0.0, 0.0, 6.0], [0.0, 0.01, 0.0])
    cam = Camera(0, 40.0, 40.0, 31.5, 31.5, R, t, 64, 64)
    with pytest.raises(ParseError):
        align_depth(np.zeros((64, 64)), cam, np.array([[100.0, 0.0, 0.0]]))


def test_pfm_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for shape in ((7, 5), (4, 6, 3)):
        a = rng.normal(size=shape).astype(np.float32)
        write_pfm(tmp_path / "a.pfm", a)
        assert np.array_equal(read_pfm(tmp_path / "a.pfm"), a)
    (tmp_path / "bad.pfm").write_bytes(b"P6\n1 1\n-1\n")
    with pytest.raises(ParseError):
        read_pfm(tmp_path / "bad.pfm")


def test_png16_depth(tmp_path):
    d = np.array([[0.0, 1.234], [65.535, 10.0]])
    write_depth_png16(tmp_path / "d.png", d)
    np.testing.assert_allclose(read_depth(tmp_path / "d.png"), d, atol=5e-4)


def test_points_ply_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(50, 3))
    col = np.round(rng.uniform(0, 1, (50, 3)) * 255) / 255
    write_points_ply(tmp_path / "p.ply", PointCloud(pos, col))
    back = read_points_ply(tmp_path / "p.ply")
    assert np.array_equal(back.positions, pos) and np.array_equal(back.colors, col)


@settings(max_examples=40, deadline=None)
@given(names=st.lists(st.text("abcdefgh_0123", min_size=1, max_size=6), min_size=1, max_size=80, unique=True),
       seed=st.integers(0, 2**31 - 1))
def test_split_depends_only_on_sorted_names(names, seed):
    perm = np.random.default_rng(seed).permutation(len(names))
    shuffled = [names[i] for i in perm]
    a = {names[i] for i in holdout_indices(names)}
    b = {shuffled[i] for i in holdout_indices(shuffled)}
    assert a == b
    assert len(a) == (len(names) + 31) // 32
    assert sorted(names)[0] in a


def test_toy_dataset_loads(toy_dataset):
    ds = load_dataset(toy_dataset)
    assert len(ds.cameras) == 24 and len(ds.test_cameras) == 1
    assert {c.view_class.name for c in ds.cameras} == {"AERIAL", "STREET"}
    sup = ds.supervision[ds.cameras[3].id]
    assert sup.gt_rgb.shape == (64, 64, 3) and sup.gt_inv_depth.max() > 0
    assert len(ds.points) > 100


def test_config_files(tmp_path):
    (tmp_path / "a.toml").write_text('seed = 3\nmode = "2d"\n[desk]\nscale = 0.01\n')
    cfg, extra = split_sections(load_config(tmp_path / "a.toml"))
    assert cfg == {"seed": 3, "mode": "2d"} and extra == {"desk": {"scale": 0.01}}
    (tmp_path / "b.json").write_text('{"seed": 1}')
    assert load_config(tmp_path / "b.json") == {"seed": 1}
    (tmp_path / "c.toml").write_text('seed = 3\nmode = \n')
    with pytest.raises(ParseError) as exc:
        load_config(tmp_path / "c.toml")
    assert exc.value.line == 2
