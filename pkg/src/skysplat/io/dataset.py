"""Dataset manifests (JSON transforms or COLMAP text), holdout split and depth alignment."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ClassTagMissing, ParseError
from ..geometry import quat_to_rotmat, rotmat_to_quat
from ..losses import SupervisionBundle
from ..scene import Camera, PointCloud, ViewClass
from .images import read_depth, read_image, read_mask
from .ply import read_points_ply, write_points_ply

log = logging.getLogger(__name__)

HOLDOUT_EVERY = 32


@dataclass
class Dataset:
    root: str
    cameras: list                       # all cameras, sorted by name
    points: PointCloud
    supervision: dict = field(default_factory=dict)
    test_ids: tuple = ()

    @property
    def train_cameras(self):
        held = set(self.test_ids)
        return [c for c in self.cameras if c.id not in held]

    @property
    def test_cameras(self):
        held = set(self.test_ids)
        return [c for c in self.cameras if c.id in held]

    def camera(self, name):
        for c in self.cameras:
            if c.name == name:
                return c
        raise KeyError(name)


def holdout_indices(names, every=HOLDOUT_EVERY):
    """Positions (in sorted-name order) held out for evaluation: every ``every``-th, starting at 0."""
    order = sorted(range(len(names)), key=lambda i: names[i])
    return sorted(order[j] for j in range(0, len(order), every))


# ---------------------------------------------------------------- JSON manifest

def _pose_from_c2w(m, path, lineno=0):
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ParseError(path, lineno, "camera_to_world must be 4x4")
    Rc2w = m[:3, :3]
    R = Rc2w.T
    t = -R @ m[:3, 3]
    return R, t


def _c2w(cam: Camera):
    m = np.eye(4)
    m[:3, :3] = cam.R.T
    m[:3, 3] = cam.center
    return m


def _frame_line_numbers(text):
    """Best-effort line number of each ``"name"`` key, for error messages."""
    lines = []
    for i, line in enumerate(text.splitlines(), 1):
        if '"name"' in line:
            lines.append(i)
    return lines


def parse_manifest(path):
    """Cameras (sorted by name, ids and appearance ids assigned) plus raw manifest dict."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from exc
    root = os.path.dirname(os.path.abspath(path))
    if "colmap" in doc:
        frames = _frames_from_colmap(os.path.join(root, doc["colmap"]), doc.get("classes", {}), doc)
    else:
        frames = doc.get("frames")
        if not isinstance(frames, list):
            raise ParseError(path, 1, "manifest needs a 'frames' list or a 'colmap' directory")
    lines = _frame_line_numbers(text)
    entries = []
    for i, fr in enumerate(frames):
        lineno = fr.get("_line", lines[i] if i < len(lines) else 0)
        if "class" not in fr or fr["class"] is None:
            raise ClassTagMissing(f"{path}:{lineno}: frame {fr.get('name', i)!r} has no class tag")
        try:
            cls = ViewClass.parse(fr["class"])
            if "camera_to_world" in fr:
                R, t = _pose_from_c2w(fr["camera_to_world"], path, lineno)
            else:
                R, t = np.asarray(fr["R"], dtype=np.float64), np.asarray(fr["t"], dtype=np.float64)
            entries.append(dict(name=str(fr["name"]), fx=float(fr["fx"]), fy=float(fr["fy"]),
                                cx=float(fr["cx"]), cy=float(fr["cy"]), R=R, t=t,
                                width=int(fr["width"]), height=int(fr["height"]), view_class=cls,
                                image=fr.get("image"), depth=fr.get("depth"), mask=fr.get("mask"),
                                needs_alignment=bool(fr.get("needs_alignment", False))))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(path, lineno, f"frame {fr.get('name', i)!r}: {exc}") from exc
    entries.sort(key=lambda e: e["name"])
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ParseError(path, 0, "duplicate frame names")
    test = set(holdout_indices(names, doc.get("holdout_every", HOLDOUT_EVERY)))
    cams, flags = [], {}
    next_app = 0
    for i, e in enumerate(entries):
        if i in test:
            app = -1
        else:
            app, next_app = next_app, next_app + 1

        def rel(p):
            return None if p is None else os.path.join(root, p)

        cams.append(Camera(i, e["fx"], e["fy"], e["cx"], e["cy"], e["R"], e["t"], e["width"], e["height"],
                           e["view_class"], app, e["name"], rel(e["image"]), rel(e["depth"]), rel(e["mask"])))
        flags[i] = e["needs_alignment"]
    return cams, sorted(test), doc, root, flags


def load_dataset(path, load_images=True) -> Dataset:
    cams, test, doc, root, flags = parse_manifest(path)
    missing = [p for c in cams for p in (c.image_path, c.depth_path, c.mask_path) if p and not os.path.exists(p)]
    if missing:
        raise ParseError(path, 0, f"referenced file does not exist: {missing[0]}")
    if "points" in doc:
        pts = read_points_ply(os.path.join(root, doc["points"]))
    elif "colmap" in doc:
        pts = read_colmap_points(os.path.join(root, doc["colmap"], "points3D.txt"))
    else:
        pts = PointCloud(np.zeros((0, 3)))
    ds = Dataset(root, cams, pts, {}, tuple(test))
    if load_images:
        png_scale = float(doc.get("depth_png_scale", 1000.0))
        for c in cams:
            ds.supervision[c.id] = load_supervision(c, pts, png_scale, flags[c.id])
    return ds


def load_supervision(cam: Camera, points: PointCloud, png_scale=1000.0, needs_alignment=False):
    if cam.image_path is None:
        raise ParseError(cam.name, 0, "frame has no image")
    rgb = read_image(cam.image_path)
    if rgb.shape[:2] != (cam.height, cam.width):
        raise ParseError(cam.image_path, 0, f"image is {rgb.shape[:2]}, manifest says {(cam.height, cam.width)}")
    mask = read_mask(cam.mask_path) if cam.mask_path else None
    inv = None
    if cam.depth_path:
        raw = read_depth(cam.depth_path, png_scale)
        if needs_alignment:
            scale, offset = align_depth(raw, cam, points.positions)
            inv = np.maximum(scale * raw + offset, 0.0)
        else:
            inv = np.where(raw > 0, 1.0 / np.maximum(raw, 1e-12), 0.0)
    return SupervisionBundle(rgb, inv, mask)


def save_manifest(path, cameras, points_file=None, holdout_every=HOLDOUT_EVERY, extra=None):
    root = os.path.dirname(os.path.abspath(path))

    def rel(p):
        return None if p is None else os.path.relpath(p, root)

    frames = []
    for c in cameras:
        fr = {"name": c.name, "class": c.view_class.name.lower(), "width": c.width, "height": c.height,
              "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "camera_to_world": _c2w(c).tolist()}
        for key, p in (("image", c.image_path), ("depth", c.depth_path), ("mask", c.mask_path)):
            if p is not None:
                fr[key] = rel(p)
        frames.append(fr)
    doc = {"frames": frames, "holdout_every": holdout_every}
    if points_file is not None:
        doc["points"] = os.path.relpath(points_file, root)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


# ---------------------------------------------------------------- COLMAP text

def _data_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s


def read_colmap_cameras(path):
    cams = {}
    for lineno, line in _data_lines(path):
        tok = line.split()
        try:
            cid, model, w, h = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
            p = [float(x) for x in tok[4:]]
        except (IndexError, ValueError) as exc:
            raise ParseError(path, lineno, str(exc)) from exc
        if model == "SIMPLE_PINHOLE" or model.startswith("SIMPLE_RADIAL"):
            fx = fy = p[0]
            cx, cy = p[1], p[2]
        elif model in ("PINHOLE", "OPENCV", "RADIAL", "FULL_OPENCV"):
            fx, fy, cx, cy = p[0], p[1], p[2], p[3]
        else:
            raise ParseError(path, lineno, f"unsupported camera model {model}")
        # COLMAP puts the first pixel center at 0.5
        cams[cid] = dict(width=w, height=h, fx=fx, fy=fy, cx=cx - 0.5, cy=cy - 0.5)
    return cams


def read_colmap_images(path):
    """images.txt: each image line is followed by one (possibly empty) 2D-point line."""
    with open(path) as fh:
        lines = [(i, ln.rstrip("\n")) for i, ln in enumerate(fh, 1) if not ln.startswith("#")]
    out = []
    for lineno, line in lines[::2]:
        tok = line.split()
        if not tok:
            continue
        if len(tok) < 10:
            raise ParseError(path, lineno, "image line needs 10 fields")
        try:
            q = np.array([float(x) for x in tok[1:5]])
            t = np.array([float(x) for x in tok[5:8]])
            cid = int(tok[8])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from exc
        out.append(dict(image_id=int(tok[0]), R=quat_to_rotmat(q / np.linalg.norm(q)), t=t, camera_id=cid,
                        name=" ".join(tok[9:]), _line=lineno))
    return out


def read_colmap_points(path) -> PointCloud:
    pos, col = [], []
    for lineno, line in _data_lines(path):
        tok = line.split()
        try:
            pos.append([float(x) for x in tok[1:4]])
            col.append([int(x) / 255.0 for x in tok[4:7]])
        except (IndexError, ValueError) as exc:
            raise ParseError(path, lineno, str(exc)) from exc
    return PointCloud(np.array(pos).reshape(-1, 3), np.array(col).reshape(-1, 3))


def _frames_from_colmap(sparse_dir, classes, doc):
    cams = read_colmap_cameras(os.path.join(sparse_dir, "cameras.txt"))
    imgs = read_colmap_images(os.path.join(sparse_dir, "images.txt"))
    image_dir = doc.get("image_dir", "images")
    frames = []
    for im in imgs:
        if im["camera_id"] not in cams:
            raise ParseError(os.path.join(sparse_dir, "images.txt"), im["_line"],
                             f"unknown camera id {im['camera_id']}")
        cam = cams[im["camera_id"]]
        stem = os.path.splitext(im["name"])[0]
        fr = dict(cam, name=im["name"], R=im["R"], t=im["t"], _line=im["_line"],
                  image=os.path.join(image_dir, im["name"]), **{"class": classes.get(im["name"])})
        for key in ("depth", "mask"):
            d = doc.get(f"{key}_dir")
            if d:
                ext = doc.get(f"{key}_ext", ".pfm" if key == "depth" else ".png")
                fr[key] = os.path.join(d, stem + ext)
        fr["needs_alignment"] = doc.get("needs_alignment", False)
        frames.append(fr)
    return frames


def write_colmap_text(sparse_dir, cameras, points: Optional[PointCloud] = None):
    os.makedirs(sparse_dir, exist_ok=True)
    with open(os.path.join(sparse_dir, "cameras.txt"), "w") as fh:
        fh.write("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for c in cameras:
            fh.write(f"{c.id + 1} PINHOLE {c.width} {c.height} {c.fx!r} {c.fy!r} {c.cx + 0.5!r} {c.cy + 0.5!r}\n")
    with open(os.path.join(sparse_dir, "images.txt"), "w") as fh:
        fh.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        for c in cameras:
            q = rotmat_to_quat(c.R)
            vals = " ".join(repr(float(x)) for x in (*q, *c.t))
            fh.write(f"{c.id + 1} {vals} {c.id + 1} {c.name}\n\n")
    with open(os.path.join(sparse_dir, "points3D.txt"), "w") as fh:
        if points is not None:
            cols = np.clip(np.round((points.colors if points.colors is not None else
                                     np.full((len(points), 3), 0.5)) * 255), 0, 255).astype(int)
            for i, (p, c) in enumerate(zip(points.positions, cols)):
                fh.write(f"{i + 1} {p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]} 0\n")


# ---------------------------------------------------------------- depth alignment

def align_depth(raw, cam: Camera, points, space="inverse", trim=0.05):
    """Fit ``target ~ scale * raw + offset`` at pixels hit by projected SfM points.

    ``space="inverse"`` fits against inverse depth of the points (monocular
    models predict relative disparity); ``"depth"`` fits metric depth. The
    worst ``trim`` fraction of residuals is discarded once and the fit redone.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv, z = cam.project(points)
    px = np.round(uv).astype(np.int64)
    ok = (z > 0) & (px[:, 0] >= 0) & (px[:, 0] < cam.width) & (px[:, 1] >= 0) & (px[:, 1] < cam.height)
    if ok.sum() < 2:
        raise ParseError(cam.name, 0, "too few SfM points project into the image for depth alignment")
    x = raw[px[ok, 1], px[ok, 0]]
    y = 1.0 / z[ok] if space == "inverse" else z[ok]

    def fit(xv, yv):
        A = np.stack([xv, np.ones_like(xv)], axis=1)
        sol, *_ = np.linalg.lstsq(A, yv, rcond=None)
        return sol

    sol = fit(x, y)
    if trim > 0 and len(x) >= 20:
        r = np.abs(sol[0] * x + sol[1] - y)
        keep = r <= np.quantile(r, 1.0 - trim)
        sol = fit(x[keep], y[keep])
    return float(sol[0]), float(sol[1])


def write_dataset_points(path, points: PointCloud):
    write_points_ply(path, points)
