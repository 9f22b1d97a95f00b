"""Command-line entry point.

Every subcommand takes ``--config`` (JSON pipeline config), ``--seed`` and
``--out``.  Exit status is 0 on success and 2 on validation errors, with a
JSON error report on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import ConfigValidationError, PipelineConfig, dump_config, load_config
from .gan import ConfigError, load_generator, train
from .grid import (Box3D, DenseGrid3D, GridError, PointCloud, ScaleDomain, log_denormalize,
                   log_normalize, percentile_sparsify, voxelize)
from .gtaug import build_bank, insert_objects, read_bank, write_bank
from .io import (FormatError, dumps_line, read_boxes, read_checkpoint, read_jsonl, read_points,
                 read_tensor, write_boxes, write_jsonl, write_points, write_tensor)
from .metrics import (DetectionRecord, average_precision, bev_scores, center_shift_study,
                      metric_bev, psnr, ssim)
from .obis import ObisConfigError
from .render import bev_render

VALIDATION_ERRORS = (ConfigValidationError, FormatError, GridError, ConfigError, ObisConfigError,
                     ValueError, KeyError, FileNotFoundError)


REPORT_FILES = {"metrics": "metrics.json", "center-shift": "center_shift.json",
                "gradcheck": "gradcheck.json"}


class UsageError(ValueError):
    pass


def _emit(obj, out: Path | None = None, name: str = "") -> None:
    text = dumps_line(obj)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


def _file_out(args, default_name: str) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / default_name
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(cfg: PipelineConfig, args) -> dict:
    out = Path(args.out or "toy_dataset")
    frames = P.toy_frames(cfg, args.n)
    manifest = P.write_frames(frames, out)
    (out / "config.json").write_text(dumps_line(dump_config(cfg)) + "\n")
    return {"manifest": str(manifest), "frames": len(frames),
            "train": sum(f.split == "train" for f in frames),
            "val": sum(f.split == "val" for f in frames)}


def cmd_voxelize(cfg: PipelineConfig, args) -> dict:
    pc = read_points(args.lidar)
    res = args.resolution or cfg.resolutions.lidar
    svg = voxelize(pc, cfg.roi_bounds(), res)
    centers = svg.origin + (svg.coords + 0.5) * svg.resolution
    # features are [occupancy, intensity, aux...]; occupancy becomes an aux channel
    cloud = PointCloud(centers, svg.features[:, 1],
                       np.concatenate([svg.features[:, :1], svg.features[:, 2:]], axis=1),
                       ("occupancy",) + tuple(svg.channels[2:]))
    path = _file_out(args, "voxels.lpc")
    write_points(path, cloud)
    return {"out": str(path), "voxels": len(svg), "dims": list(svg.dims), "resolution": res}


def cmd_obis(cfg: PipelineConfig, args) -> dict:
    if args.manifest:
        out = Path(args.out or "obis_dataset")
        frames = [P.with_obis(f, cfg) for f in P.read_manifest(args.manifest)]
        manifest = P.write_frames(frames, out)
        return {"manifest": str(manifest), "frames": len(frames)}
    if not (args.lidar and args.boxes):
        raise UsageError("obis needs --manifest or both --lidar and --boxes")
    frame = P.Frame("frame", read_points(args.lidar), read_boxes(args.boxes))
    pc = P.with_obis(frame, cfg).lidar
    path = _file_out(args, "obis.lpc")
    write_points(path, pc)
    return {"out": str(path), "points": len(pc), "added": len(pc) - len(frame.lidar),
            "channels": list(pc.channels)}


def cmd_gtaug(cfg: PipelineConfig, args) -> dict:
    if not args.manifest:
        raise UsageError("gtaug needs --manifest")
    out = Path(args.out or "gtaug_dataset")
    frames = P.read_manifest(args.manifest)
    g = cfg.gtaug
    if args.bank:
        bank = read_bank(args.bank)
    else:
        train_frames = [f for f in frames if f.split == "train"]
        bank = build_bank([(f.lidar, f.boxes) for f in train_frames], g.min_points,
                          [f.name for f in train_frames])
        write_bank(bank, out / "bank")
    n_insert = g.n_insert if args.n_insert is None else args.n_insert
    result, counts = [], []
    for i, f in enumerate(frames):
        if f.split != "train":
            result.append(f)
            continue
        seed = int(np.random.SeedSequence([cfg.seed, i, 1]).generate_state(1)[0])
        pc, boxes, n = insert_objects(f.lidar, f.boxes, bank, n_insert, seed, cfg.roi_bounds(),
                                      g.ground_z, g.max_attempts)
        counts.append(n)
        # the stored radar no longer matches the scene; it is synthesized downstream
        result.append(P.Frame(f.name, pc, boxes, None if n else f.radar, f.split))
    manifest = P.write_frames(result, out)
    return {"manifest": str(manifest), "bank_entries": len(bank), "requested": n_insert,
            "inserted": counts}


def _checkpoint_meta(cfg: PipelineConfig) -> dict:
    return {"config": dump_config(cfg)}


def cmd_train(cfg: PipelineConfig, args) -> dict:
    manifest = args.manifest or cfg.dataset
    if not manifest:
        raise UsageError("train needs --manifest or a dataset path in the config")
    out = Path(args.out or "run")
    frames = [f for f in P.read_manifest(manifest) if f.radar is not None]
    train_s = [P.make_sample(f, cfg) for f in frames if f.split == "train"]
    val_s = [P.make_sample(f, cfg) for f in frames if f.split == "val"]
    if not train_s:
        raise UsageError(f"{manifest}: no training frames with radar targets")
    epochs = args.epochs or cfg.epochs
    res = train(train_s, cfg.generator_config(), cfg.discriminator_config(),
                cfg.loss_weights_config(), cfg.optimizer_config(), epochs, cfg.seed, val_s,
                out, _checkpoint_meta(cfg), args.max_steps)
    artifacts = {p.name: P.file_digest(p) for p in sorted(out.iterdir())
                 if p.is_file() and p.name != "run.json"}
    (out / "run.json").write_text(dumps_line({"config": dump_config(cfg),
                                              "artifacts": artifacts}) + "\n")
    return {"out": str(out), "epochs": len(res.history), "final": res.history[-1]}


def _load_checkpoint(path):
    params, _, meta = read_checkpoint(path)
    cfg = PipelineConfig.model_validate(meta["config"])
    return load_generator(params, meta), cfg


def cmd_synth(cfg: PipelineConfig, args) -> dict:
    if not (args.checkpoint and args.lidar):
        raise UsageError("synth needs --checkpoint and --lidar")
    G, ck_cfg = _load_checkpoint(args.checkpoint)
    grid = P.synthesize(G, read_points(args.lidar), ck_cfg)
    if args.raw:
        grid = log_denormalize(grid, ck_cfg.metrics.v_ref)
    path = _file_out(args, "synth.rdt")
    write_tensor(path, grid)
    return {"out": str(path), "dims": list(grid.dims), "scale_domain": grid.scale_domain.value}


def _raw(g: DenseGrid3D, v_ref) -> DenseGrid3D:
    if g.scale_domain == ScaleDomain.RAW_POWER:
        return g
    if v_ref is None:
        raise UsageError("a log-normalized tensor needs metrics.v_ref to recover raw power")
    return log_denormalize(g, v_ref)


def cmd_sparsify(cfg: PipelineConfig, args) -> dict:
    g = _raw(read_tensor(args.tensor), cfg.metrics.v_ref)
    k = cfg.metrics.sparsify_k if args.k is None else args.k
    pc = percentile_sparsify(g, k)
    path = _file_out(args, "sparse.lpc")
    write_points(path, pc)
    return {"out": str(path), "points": len(pc), "cells": int(g.values.size), "k": k}


def _target(g: DenseGrid3D, v_ref) -> np.ndarray:
    return P.radar_target(g, v_ref)


def cmd_metrics(cfg: PipelineConfig, args) -> dict:
    if args.mode == "ap":
        if not (args.dets and args.gt):
            raise UsageError("ap mode needs --dets and --gt")
        dets = [DetectionRecord(str(r["frame"]), Box3D.from_dict(r), float(r["score"]))
                for r in read_jsonl(args.dets)]
        gts: dict = {}
        for r in read_jsonl(args.gt):
            gts.setdefault(str(r["frame"]), []).append(Box3D.from_dict(r))
        thr = cfg.metrics.iou_thresh if args.iou is None else args.iou
        return {"mode": "ap", "iou": thr,
                "ap_bev": average_precision(dets, gts, thr, "bev"),
                "ap_3d": average_precision(dets, gts, thr, "3d")}
    preds, truths = args.pred or [], args.truth or []
    if not preds or len(preds) != len(truths):
        raise UsageError("image mode needs matching --pred and --truth lists")
    v_ref = cfg.metrics.v_ref
    rows = []
    for p, t in zip(preds, truths):
        gp, gt = read_tensor(p), read_tensor(t)
        if gp.dims != gt.dims:
            raise UsageError(f"{p} dims {gp.dims} != {t} dims {gt.dims}")
        if cfg.metrics.order == "normalize_then_pool":
            ps, ss = bev_scores(_target(gp, v_ref), _target(gt, v_ref))
        else:
            a = metric_bev(gp, v_ref, cfg.metrics.order)
            b = metric_bev(gt, v_ref, cfg.metrics.order)
            ps, ss = psnr(a, b), (ssim(a, b) if min(a.shape) >= 11 else float("nan"))
        rows.append({"pred": str(p), "truth": str(t), "psnr": ps, "ssim": ss})
    return {"mode": "image", "order": cfg.metrics.order,
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])), "frames": rows}


def cmd_bev(cfg: PipelineConfig, args) -> dict:
    g = read_tensor(args.tensor)
    if g.scale_domain == ScaleDomain.RAW_POWER:
        g = log_normalize(g, cfg.metrics.v_ref)
    path = _file_out(args, "bev.ppm")
    bev_render(g.values.mean(axis=2), path)
    return {"out": str(path), "width": g.dims[1], "height": g.dims[0]}


def cmd_center_shift(cfg: PipelineConfig, args) -> dict:
    res = tuple(args.resolutions)
    shifts = center_shift_study(args.n, res, cfg.seed, class_mix=dict(cfg.toyworld.class_mix))
    out = {"n": args.n, "seed": cfg.seed, "mean_shift_m": {str(k): v for k, v in shifts.items()}}
    return out


def cmd_gradcheck(cfg: PipelineConfig, args) -> dict:
    from .gradcheck import run

    worst = run(range(cfg.seed, cfg.seed + args.seeds))
    top = max(worst.values())
    out = {"seeds": args.seeds, "max_relative_error": top, "tolerance": args.tol,
           "passed": top < args.tol, "checks": worst}
    return out


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radarsynth",
                                     description="LiDAR-to-radar tensor synthesis pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output file or directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[common], help="write a toy paired dataset")
    p.add_argument("--n", type=int, help="number of scenes (default from config)")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("voxelize", parents=[common], help="LPC1 -> voxel-center LPC1")
    p.add_argument("--lidar", required=True)
    p.add_argument("--resolution", type=float)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("obis", parents=[common], help="add box edge and Gaussian points")
    p.add_argument("--manifest")
    p.add_argument("--lidar")
    p.add_argument("--boxes")
    p.set_defaults(func=cmd_obis)

    p = sub.add_parser("gtaug", parents=[common], help="insert bank objects into LiDAR frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", help="existing bank directory (default: build from train split)")
    p.add_argument("--n-insert", type=int)
    p.set_defaults(func=cmd_gtaug)

    p = sub.add_parser("train", parents=[common], help="train the generator")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", parents=[common], help="checkpoint + LiDAR -> RDT1")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lidar", required=True)
    p.add_argument("--raw", action="store_true", help="write raw power instead of log-normalized")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sparsify", parents=[common], help="top-k%% radar cells -> LPC1")
    p.add_argument("--tensor", required=True)
    p.add_argument("--k", type=float, help="percent of cells to keep (default 7)")
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("metrics", parents=[common], help="BEV PSNR/SSIM or detection AP")
    p.add_argument("--mode", choices=("image", "ap"), default="image")
    p.add_argument("--pred", nargs="+")
    p.add_argument("--truth", nargs="+")
    p.add_argument("--dets")
    p.add_argument("--gt")
    p.add_argument("--iou", type=float)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bev", parents=[common], help="RDT1 -> BEV jet heatmap (PPM)")
    p.add_argument("--tensor", required=True)
    p.set_defaults(func=cmd_bev)

    p = sub.add_parser("center-shift", parents=[common], help="voxel center-shift study")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--resolutions", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.4])
    p.set_defaults(func=cmd_center_shift)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, overrides)
        result = args.func(cfg, args)
    except VALIDATION_ERRORS as exc:
        report = exc.to_dict() if hasattr(exc, "to_dict") else {
            "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(report, sort_keys=True), file=sys.stderr)
        return 2
    name = REPORT_FILES.get(args.command)
    _emit(result, Path(args.out) if name and args.out else None, name or "")
    if args.command == "gradcheck" and not result["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
