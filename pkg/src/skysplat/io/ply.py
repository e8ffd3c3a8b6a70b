"""Binary little-endian PLY for anchors, baked Gaussians, point clouds and meshes."""
from __future__ import annotations

import json

import numpy as np

from ..decoder import BakedGaussianSet, DecoderBank
from ..errors import ParseError
from ..scene import AnchorField, LodConfig, PointCloud

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4", "uint": "<u4",
    "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1", "int16": "<i2", "uint16": "<u2",
    "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint",
              "f4": "float", "f8": "double"}
SH_C0 = 0.28209479177387814


def write_ply(path, elements, comments=()):
    """``elements``: list of (name, structured array) or (name, array, list_spec) for face lists."""
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    blobs = []
    for el in elements:
        name, arr = el[0], el[1]
        if name == "face":
            faces = np.asarray(arr, dtype=np.int32)
            header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
            rec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (faces.shape[1],))])
            rec["n"] = faces.shape[1]
            rec["idx"] = faces
            blobs.append(rec.tobytes())
            continue
        header.append(f"element {name} {len(arr)}")
        for fname in arr.dtype.names:
            code = arr.dtype[fname].str[1:]
            header.append(f"property {_NP_TO_PLY[code]} {fname}")
        blobs.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)


def read_ply(path):
    """Returns ({element: structured array}, comments). Binary little-endian only."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(path, 1, "not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    body = memoryview(data)[end + len(b"end_header\n"):]
    elements, comments = [], []
    for lineno, line in enumerate(lines, 1):
        tok = line.split()
        if not tok or tok[0] == "ply":
            continue
        if tok[0] == "format":
            if tok[1] != "binary_little_endian":
                raise ParseError(path, lineno, f"unsupported format {tok[1]}")
        elif tok[0] == "comment":
            comments.append(line[len("comment "):])
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise ParseError(path, lineno, "property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise ParseError(path, lineno, f"unknown type {tok[1]}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(path, lineno, f"unexpected header line {line!r}")
    out = {}
    off = 0
    for name, count, props in elements:
        if any(isinstance(t, tuple) for _, t in props):
            (pname, (_, ctype, itype)), = props
            rows = []
            for _ in range(count):
                n = int(np.frombuffer(body, dtype=ctype, count=1, offset=off)[0])
                off += np.dtype(ctype).itemsize
                rows.append(np.frombuffer(body, dtype=itype, count=n, offset=off))
                off += n * np.dtype(itype).itemsize
            out[name] = np.array(rows, dtype=np.int64).reshape(count, -1)
            continue
        dt = np.dtype(props)
        if off + dt.itemsize * count > len(body):
            raise ParseError(path, len(lines), f"truncated element {name}")
        out[name] = np.frombuffer(body, dtype=dt, count=count, offset=off).copy()
        off += dt.itemsize * count
    return out, comments


def _struct(columns):
    dt = [(n, a.dtype.str) for n, a in columns]
    rec = np.zeros(len(columns[0][1]), dtype=dt)
    for n, a in columns:
        rec[n] = a
    return rec


# ---------------------------------------------------------------- point clouds

def write_points_ply(path, points: PointCloud):
    c8 = np.clip(np.round(points.colors * 255), 0, 255).astype(np.uint8)
    p = points.positions
    write_ply(path, [("vertex", _struct([("x", p[:, 0]), ("y", p[:, 1]), ("z", p[:, 2]),
                                          ("red", c8[:, 0]), ("green", c8[:, 1]), ("blue", c8[:, 2])]))])


def read_points_ply(path) -> PointCloud:
    els, _ = read_ply(path)
    v = els["vertex"]
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if "red" in v.dtype.names:
        col = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    else:
        col = np.full((len(v), 3), 0.5)
    return PointCloud(pos, col)


# ---------------------------------------------------------------- anchors

def write_anchor_ply(path, field_: AnchorField, meta=None):
    """Lossless anchor dump (float64 throughout); LOD and ``meta`` ride in comments."""
    cols = [("x", field_.positions[:, 0]), ("y", field_.positions[:, 1]), ("z", field_.positions[:, 2]),
            ("level", field_.levels.astype(np.int32)), ("stage", field_.stage.astype(np.uint8))]
    cols += [(f"f_feat_{i}", field_.features[:, i]) for i in range(field_.feature_dim)]
    cols += [(f"scale_{i}", field_.log_scaling[:, i]) for i in range(3)]
    off = field_.offsets.reshape(len(field_), -1)
    cols += [(f"offset_{i}", off[:, i]) for i in range(off.shape[1])]
    comments = ["skysplat anchors", "lod " + json.dumps(_lod_dict(field_.lod)), f"k {field_.k}"]
    if meta:
        comments.append("meta " + json.dumps(meta))
    write_ply(path, [("vertex", _struct(cols))], comments)


def _lod_dict(lod):
    return {"K": lod.K, "K_aerial": lod.K_aerial, "r_d": lod.r_d, "base_voxel": lod.base_voxel,
            "level_distance_cutoffs": list(lod.level_distance_cutoffs)}


def _lod_from_json(text):
    d = json.loads(text)
    d["level_distance_cutoffs"] = tuple(d["level_distance_cutoffs"])
    return LodConfig(**d)


def read_anchor_ply(path):
    els, comments = read_ply(path)
    info = dict(c.split(" ", 1) for c in comments if " " in c)
    if "lod" not in info:
        raise ParseError(path, 1, "missing LOD comment; not an anchor file")
    lod = _lod_from_json(info["lod"])
    k = int(info["k"])
    v = els["vertex"]
    names = v.dtype.names
    F = sum(n.startswith("f_feat_") for n in names)
    n = len(v)
    f = AnchorField(
        lod,
        np.stack([v["x"], v["y"], v["z"]], axis=1),
        v["level"].astype(np.int64),
        np.stack([v[f"f_feat_{i}"] for i in range(F)], axis=1) if F else np.zeros((n, 0)),
        np.stack([v[f"scale_{i}"] for i in range(3)], axis=1),
        np.stack([v[f"offset_{i}"] for i in range(3 * k)], axis=1).reshape(n, k, 3),
        v["stage"].astype(np.uint8), k, F,
    )
    meta = json.loads(info["meta"]) if "meta" in info else {}
    return f, meta


def save_bank(path, bank: DecoderBank):
    meta = {"feature_dim": bank.feature_dim, "k": bank.k, "appearance_dim": bank.appearance_dim,
            "hidden": bank.hidden, "dist_scale": bank.dist_scale, "bake_distance": bank.bake_distance,
            "frozen": bank.frozen, "n_images": len(bank.appearance)}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **bank.params())


def load_bank(path) -> DecoderBank:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        bank = DecoderBank(meta["feature_dim"], meta["k"], meta["n_images"], meta["appearance_dim"],
                           meta["hidden"], rng=np.random.default_rng(0), dist_scale=meta["dist_scale"])
        for name in bank.params():
            bank.set_param(name, data[name].copy())
    bank.bake_distance = meta["bake_distance"]
    bank.frozen = meta["frozen"]
    return bank


# ---------------------------------------------------------------- baked Gaussians

def write_baked_ply(path, baked: BakedGaussianSet, lod: LodConfig = None):
    """3DGS community layout: f_dc/f_rest SH, logit opacity, log scales, wxyz rotation."""
    n = len(baked)
    mu = baked.mu
    s = baked.s if baked.s.shape[1] == 3 else np.concatenate([baked.s, np.full((n, 1), 1e-8)], axis=1)
    sh = baked.sh
    dc = sh[:, 0, :] - 0.5 / SH_C0
    rest = sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    op = np.clip(baked.opacity, 1e-7, 1 - 1e-7)
    cols = [("x", mu[:, 0]), ("y", mu[:, 1]), ("z", mu[:, 2])]
    cols += [(c, np.zeros(n, dtype=np.float32)) for c in ("nx", "ny", "nz")]
    cols += [(f"f_dc_{i}", dc[:, i]) for i in range(3)]
    cols += [(f"f_rest_{i}", rest[:, i]) for i in range(rest.shape[1])]
    cols.append(("opacity", np.log(op / (1 - op))))
    cols += [(f"scale_{i}", np.log(s[:, i])) for i in range(3)]
    cols += [(f"rot_{i}", baked.q[:, i]) for i in range(4)]
    cols += [(f"anchor_{c}", baked.anchor_pos[:, i]) for i, c in enumerate("xyz")]
    cols = [(nm, np.asarray(a, dtype=np.float32)) for nm, a in cols]
    cols.append(("level", baked.level.astype(np.int32)))
    comments = [f"appearance {json.dumps(np.asarray(baked.appearance).tolist())}",
                f"scale_dim {baked.s.shape[1]}"]
    if lod is not None:
        comments.append("lod " + json.dumps(_lod_dict(lod)))
    write_ply(path, [("vertex", _struct(cols))], comments)


def read_baked_ply(path, with_lod=False):
    els, comments = read_ply(path)
    info = dict(c.split(" ", 1) for c in comments if " " in c)
    v = els["vertex"]
    n = len(v)
    f64 = lambda name: v[name].astype(np.float64)  # noqa: E731
    mu = np.stack([f64("x"), f64("y"), f64("z")], axis=1)
    dc = np.stack([f64(f"f_dc_{i}") for i in range(3)], axis=1) + 0.5 / SH_C0
    n_rest = sum(nm.startswith("f_rest_") for nm in v.dtype.names)
    rest = np.stack([f64(f"f_rest_{i}") for i in range(n_rest)], axis=1).reshape(n, 3, -1).transpose(0, 2, 1)
    sh = np.concatenate([dc[:, None, :], rest], axis=1)
    sdim = int(info.get("scale_dim", 3))
    s = np.exp(np.stack([f64(f"scale_{i}") for i in range(sdim)], axis=1))
    q = np.stack([f64(f"rot_{i}") for i in range(4)], axis=1)
    op = 1.0 / (1.0 + np.exp(-f64("opacity")))
    level = v["level"].astype(np.int64) if "level" in v.dtype.names else np.zeros(n, dtype=np.int64)
    app = np.asarray(json.loads(info["appearance"])) if "appearance" in info else np.zeros(0)
    if "anchor_x" in v.dtype.names:
        apos = np.stack([f64("anchor_x"), f64("anchor_y"), f64("anchor_z")], axis=1)
    else:
        apos = mu.copy()
    baked = BakedGaussianSet(mu, q, s, op, sh, level, apos, np.zeros(n), app)
    if with_lod:
        return baked, (_lod_from_json(info["lod"]) if "lod" in info else None)
    return baked


# ---------------------------------------------------------------- meshes

def write_mesh_ply(path, vertices, faces, normals=None):
    v = np.asarray(vertices, dtype=np.float32)
    cols = [("x", v[:, 0]), ("y", v[:, 1]), ("z", v[:, 2])]
    if normals is not None:
        nn = np.asarray(normals, dtype=np.float32)
        cols += [("nx", nn[:, 0]), ("ny", nn[:, 1]), ("nz", nn[:, 2])]
    write_ply(path, [("vertex", _struct(cols)), ("face", np.asarray(faces, dtype=np.int32).reshape(-1, 3))])


def read_mesh_ply(path):
    els, _ = read_ply(path)
    v = els["vertex"]
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    normals = None
    if "nx" in v.dtype.names:
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    faces = els.get("face", np.zeros((0, 3), dtype=np.int64))
    return verts, faces, normals
