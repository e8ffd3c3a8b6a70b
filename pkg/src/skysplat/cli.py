"""Command-line entry point: ``skysplat <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .errors import SkysplatError

log = logging.getLogger("skysplat")

COMMANDS = ("train", "render", "eval", "partition", "train-chunks", "merge", "mesh", "bake", "validate",
            "make-toy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def _manifest_path(path):
    if os.path.isdir(path):
        path = os.path.join(path, "transforms.json")
    if not os.path.exists(path):
        raise UsageError(f"dataset manifest not found: {path}")
    return path


def _train_config(args):
    from .io.config import load_config, split_sections
    from .trainer import TrainConfig

    raw = load_config(args.config) if args.config else {}
    raw, extra = split_sections(raw)
    cfg = TrainConfig.from_dict(raw)
    desk = extra.get("desk", {})
    scale = args.desk if getattr(args, "desk", None) is not None else desk.get("scale")
    if scale is not None:
        lr_scale = desk.get("lr_scale")
        kw = {"lr_scale": lr_scale} if lr_scale is not None else {}
        base = {f: getattr(cfg, f) for f in ("mode", "seed", "k", "feature_dim", "appearance_dim", "base_voxel",
                                             "r_d", "single_stage", "checkpoint_every")}
        cfg = TrainConfig.desk(float(scale), schedule=cfg.schedule, loss=cfg.loss, lr=cfg.lr, **kw, **base)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.mode is not None:
        cfg.mode = args.mode
    return cfg, extra


def _out(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def save_model(out_dir, field_, bank, mode, extra=None):
    from .io.ply import save_bank, write_anchor_ply

    meta = {"mode": mode, **(extra or {})}
    write_anchor_ply(os.path.join(out_dir, "anchors.ply"), field_, meta)
    save_bank(os.path.join(out_dir, "bank.npz"), bank)


def load_model(model_dir):
    from .io.ply import load_bank, read_anchor_ply

    apath = os.path.join(model_dir, "anchors.ply")
    if not os.path.exists(apath):
        raise UsageError(f"no trained model in {model_dir}")
    field_, meta = read_anchor_ply(apath)
    bank = load_bank(os.path.join(model_dir, "bank.npz"))
    return field_, bank, meta.get("mode", "3d")


def _select_cameras(ds, split):
    if split == "test":
        return ds.test_cameras
    if split == "train":
        return ds.train_cameras
    return ds.cameras


def _render(field_, bank, cam, mode):
    from .decoder import decode, select_anchors
    from .render import rasterize

    idx = select_anchors(field_, cam, field_.lod.K)
    g = decode(field_, idx, bank, cam, mode=mode, return_context=False)
    return rasterize(g, cam, mode)


def _render_baked(baked, lod, cam, mode):
    from .decoder import baked_to_gaussians, select_baked
    from .render import rasterize

    idx = select_baked(baked, lod, cam)
    return rasterize(baked_to_gaussians(baked, cam, idx), cam, mode)


def _print(obj):
    print(json.dumps(obj, indent=1, default=float))


# ---------------------------------------------------------------- commands

def cmd_make_toy(args):
    from .io.toy import write_toy_dataset

    out = _out(args, "toy")
    path = write_toy_dataset(out, size=args.size, seed=args.seed if args.seed is not None else 0)
    print(path)
    return 0


def cmd_validate(args):
    from .io.dataset import load_dataset
    from .scene import validate_scene

    ds = load_dataset(_manifest_path(args.dataset), load_images=False)
    rep = validate_scene(ds.cameras, ds.points, two_stage=not args.single_stage)
    doc = rep.as_dict()
    doc.update({"points": len(ds.points), "held_out": len(ds.test_ids)})
    _print(doc)
    return 0 if rep.ok else 1


def cmd_train(args):
    from .io.dataset import load_dataset
    from .trainer import TrainScene, Trainer

    cfg, _ = _train_config(args)
    ds = load_dataset(_manifest_path(args.dataset))
    scene = TrainScene(ds.train_cameras, ds.points, ds.supervision)
    tr = Trainer(scene, cfg)
    out = _out(args, "run")
    if args.resume:
        tr.load_checkpoint(args.resume)
    tr.checkpoint_dir = out
    log_path = os.path.join(out, "train_log.jsonl")
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as fh:
        written = [len(tr.log)]

        def flush(t):
            for e in t.log[written[0]:]:
                fh.write(json.dumps(e, default=float) + "\n")
            written[0] = len(t.log)

        tr.run(until=args.until, callback=flush)
        flush(tr)
    tr.save_checkpoint(os.path.join(out, "checkpoint.npz"))
    save_model(out, tr.field, tr.bank, cfg.mode, {"iteration": tr.iteration, "stage": tr.stage})
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1)
    rows = tr.evaluate(ds.test_cameras, ds.supervision) if ds.test_cameras else []
    _print({"iterations": tr.iteration, "anchors_per_level": tr.field.count_per_level(), "held_out": rows})
    return 0


def cmd_render(args):
    from .io.dataset import load_dataset
    from .io.images import write_image, write_pfm

    field_, bank, mode = load_model(args.model)
    mode = args.mode or mode
    ds = load_dataset(_manifest_path(args.dataset), load_images=False)
    out = _out(args, os.path.join(args.model, "renders"))
    baked, lod = None, None
    if args.baked:
        from .io.ply import read_baked_ply

        baked, lod = read_baked_ply(args.baked, with_lod=True)
        lod = lod or field_.lod
    for cam in _select_cameras(ds, args.split):
        r = _render_baked(baked, lod, cam, mode) if baked is not None else _render(field_, bank, cam, mode)
        write_image(os.path.join(out, cam.name + ".png"), np.clip(r.rgb, 0, 1))
        write_pfm(os.path.join(out, cam.name + "_depth.pfm"), r.depth)
        write_pfm(os.path.join(out, cam.name + "_normal.pfm"), r.normal)
    print(out)
    return 0


def evaluate_model(field_, bank, mode, ds, split="test"):
    from .losses import psnr, psnr_tab, ssim

    rows = []
    for cam in _select_cameras(ds, split):
        r = _render(field_, bank, cam, mode)
        sup = ds.supervision[cam.id]
        img = np.clip(r.rgb, 0, 1)
        rows.append({"name": cam.name, "view": cam.view_class.name.lower(),
                     "psnr": psnr_tab(psnr(img, sup.gt_rgb, sup.mask)), "ssim": ssim(img, sup.gt_rgb, sup.mask)})
    summary = {}
    for view in ("aerial", "street"):
        sel = [r for r in rows if r["view"] == view]
        if sel:
            summary[view] = {"psnr": float(np.mean([r["psnr"] for r in sel])),
                             "ssim": float(np.mean([r["ssim"] for r in sel])), "count": len(sel)}
    return {"split": split, "per_image": rows, "summary": summary}


def cmd_eval(args):
    from .io.dataset import load_dataset

    field_, bank, mode = load_model(args.model)
    ds = load_dataset(_manifest_path(args.dataset))
    res = evaluate_model(field_, bank, args.mode or mode, ds, args.split)
    out = _out(args, args.model)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(res, fh, indent=1)
    with open(os.path.join(out, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "view", "psnr", "ssim"])
        for r in res["per_image"]:
            w.writerow([r["name"], r["view"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"])
        for view, m in res["summary"].items():
            w.writerow([f"mean_{view}", view, f"{m['psnr']:.6f}", f"{m['ssim']:.6f}"])
    _print(res)
    return 0


def cmd_bake(args):
    from .decoder import bake_explicit
    from .io.ply import write_baked_ply

    field_, bank, mode = load_model(args.model)
    baked = bake_explicit(field_, bank, args.mode or mode)
    out = _out(args, args.model)
    path = os.path.join(out, "baked.ply")
    write_baked_ply(path, baked, field_.lod)
    _print({"gaussians": len(baked), "path": path, "max_sh_residual": float(baked.residual.max(initial=0))})
    return 0


def cmd_partition(args):
    from .io.dataset import load_dataset
    from .largescale import augment_chunk, partition

    ds = load_dataset(_manifest_path(args.dataset))
    cams = ds.train_cameras
    plan = partition(cams, ds.points, args.grid[0], args.grid[1], args.margin, args.visibility)
    depths = {c.id: 1.0 / np.where(ds.supervision[c.id].gt_inv_depth > 0, ds.supervision[c.id].gt_inv_depth, np.inf)
              for c in cams if ds.supervision[c.id].gt_inv_depth is not None}
    images = {c.id: ds.supervision[c.id].gt_rgb for c in cams}
    plan.chunks = [augment_chunk(ch, cams, ds.points, depths, images, plan.visibility_threshold)
                   if ch.cameras else ch for ch in plan.chunks]
    out = _out(args, "plan")
    path = plan.to_manifest(os.path.join(out, "plan.json"))
    _print({"plan": path, "chunks": [{"grid_index": list(c.grid_index), "cameras": len(c.cameras),
                                      "points": len(c.seed_points)} for c in plan.chunks],
            "empty": [list(e) for e in plan.empty]})
    return 0


def cmd_train_chunks(args):
    from .io.dataset import load_dataset
    from .io.ply import write_baked_ply
    from .largescale import PartitionPlan, train_chunks, warm_start_appearance
    from .trainer import TrainScene, build_lod, lod_base_distance
    from .scene import init_anchors

    cfg, extra = _train_config(args)
    ds = load_dataset(_manifest_path(args.dataset))
    plan = PartitionPlan.from_manifest(args.plan, ds.cameras)
    cams = ds.train_cameras
    n_images = TrainScene(cams, ds.points, ds.supervision).n_images
    lod = build_lod(cams, ds.points, cfg.r_d, cfg.base_voxel)
    lod = lod.with_cutoffs(lod_base_distance(cams, init_anchors(ds.points, lod, cfg.k, cfg.feature_dim,
                                                                np.random.default_rng(cfg.seed)), lod.r_d))
    app = warm_start_appearance(cams, ds.points, ds.supervision, cfg, lod, n_images=n_images)
    workers = args.workers or int(extra.get("largescale", {}).get("workers", 1))
    out = _out(args, "chunks")
    report = []

    def done(res):
        r, c = res.grid_index
        entry = {"grid_index": [r, c], "ok": res.ok}
        if res.ok:
            d = os.path.join(out, f"chunk_{r}_{c}")
            os.makedirs(d, exist_ok=True)
            save_model(d, res.field, res.bank, cfg.mode)
            write_baked_ply(os.path.join(d, "baked.ply"), res.baked, res.field.lod)
            entry["gaussians"] = len(res.baked)
        else:
            entry["error"] = res.error.splitlines()[0]
        report.append(entry)

    train_chunks(plan, ds.supervision, cfg, workers, lod=lod, appearance=app, n_images=n_images, on_done=done)
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    _print(report)
    return 0 if all(e["ok"] for e in report) else 1


def cmd_merge(args):
    from .io.ply import read_baked_ply, write_baked_ply
    from .largescale import merge

    with open(args.plan) as fh:
        doc = json.load(fh)
    ids = sorted({i for c in doc["chunks"] for i in c["camera_ids"]})
    from .largescale import PartitionPlan
    from .scene import Camera

    stub = [Camera(i, 1, 1, 0, 0, np.eye(3), np.zeros(3), 1, 1) for i in ids]
    plan = PartitionPlan.from_manifest(args.plan, stub)
    models, lod = {}, None
    for ch in plan.chunks:
        r, c = ch.grid_index
        p = os.path.join(args.chunks, f"chunk_{r}_{c}", "baked.ply")
        if os.path.exists(p):
            models[(r, c)], lod_c = read_baked_ply(p, with_lod=True)
            lod = lod or lod_c
    merged = merge(plan, models)
    out = _out(args, args.chunks)
    path = os.path.join(out, "merged.ply")
    write_baked_ply(path, merged, lod)
    _print({"gaussians": len(merged), "path": path})
    return 0


def cmd_mesh(args):
    from .io.dataset import load_dataset
    from .io.ply import write_mesh_ply
    from .mesh import edge_valence, extract_mesh

    field_, bank, mode = load_model(args.model)
    ds = load_dataset(_manifest_path(args.dataset), load_images=False)
    mesh = extract_mesh(field_, bank, ds.cameras, args.resolution, args.mode or mode)
    out = _out(args, args.model)
    path = os.path.join(out, "mesh.ply")
    write_mesh_ply(path, mesh.vertices, mesh.faces, mesh.normals)
    val = edge_valence(mesh.faces) if len(mesh.faces) else np.zeros(0)
    _print({"vertices": len(mesh.vertices), "triangles": len(mesh.faces), "path": path,
            "boundary_edges": int(np.sum(val == 1))})
    return 0


HANDLERS = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval, "partition": cmd_partition,
            "train-chunks": cmd_train_chunks, "merge": cmd_merge, "mesh": cmd_mesh, "bake": cmd_bake,
            "validate": cmd_validate, "make-toy": cmd_make_toy}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global random seed")
    common.add_argument("--mode", choices=("3d", "2d"), default=argparse.SUPPRESS, help="primitive type")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="skysplat", description="Aerial and street view Gaussian splatting.", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("make-toy", parents=[common], help="write the procedural toy dataset")
    s.add_argument("--size", type=int, default=64)

    s = sub.add_parser("validate", parents=[common], help="check a dataset")
    s.add_argument("dataset")
    s.add_argument("--single-stage", action="store_true")

    s = sub.add_parser("train", parents=[common], help="two-stage training")
    s.add_argument("dataset")
    s.add_argument("--desk", type=float, default=None, help="shrink the schedule by this factor")
    s.add_argument("--until", type=int, default=None, help="stop after this iteration")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")

    for name, helptext in (("render", "render views"), ("eval", "held-out metrics")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("model")
        s.add_argument("dataset")
        s.add_argument("--split", choices=("test", "train", "all"), default="test")
        if name == "render":
            s.add_argument("--baked", default=None, help="render a baked PLY instead of the MLP model")

    s = sub.add_parser("bake", parents=[common], help="export explicit SH Gaussians")
    s.add_argument("model")

    s = sub.add_parser("partition", parents=[common], help="split cameras into chunks")
    s.add_argument("dataset")
    s.add_argument("--grid", type=int, nargs=2, default=(2, 1), metavar=("M", "N"))
    s.add_argument("--margin", type=float, default=None)
    s.add_argument("--visibility", type=float, default=0.25)

    s = sub.add_parser("train-chunks", parents=[common], help="train every chunk of a plan")
    s.add_argument("plan")
    s.add_argument("dataset")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--desk", type=float, default=None)

    s = sub.add_parser("merge", parents=[common], help="merge trained chunks")
    s.add_argument("plan")
    s.add_argument("chunks")

    s = sub.add_parser("mesh", parents=[common], help="TSDF mesh from rendered depth")
    s.add_argument("model")
    s.add_argument("dataset")
    s.add_argument("--resolution", type=int, default=128)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("skysplat: missing command")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    for name in ("config", "seed", "mode", "out", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SkysplatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
