"""Command-line entry point: synth, train, render, mesh, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import tomli
import torch

from .evaluation import evaluate, fuse_mesh, scene_bounds
from .fileio import read_png, write_fmap, write_png
from .meshing import TriangleMesh, mesh_metrics, write_metrics
from .primitives import CheckpointFormatError, GaussianSet, SurfelSet, load_checkpoint
from .scenes import PRESETS, DatasetError, SyntheticSceneSpec, generate_synthetic, load_cameras, load_dataset, psnr, ssim
from .splatting import render_2d, render_3d
from .training import ConfigError, TrainConfig, TrainingDivergedError, train

log = logging.getLogger("dualsplat")

# small budgets that finish in a couple of minutes on one core
PROFILES = {
    "smoke": dict(warmup_max_iters=150, warmup_min_iters=50, autostop_window=50, mutual_iters=100, densify_interval=0),
    "default": {},
}


class UsageFailure(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _spec_from_arg(name: str, seed: int | None) -> SyntheticSceneSpec:
    if name in PRESETS:
        spec = PRESETS[name]
    else:
        path = Path(name)
        if not path.exists():
            raise UsageFailure(f"unknown spec {name!r}; presets: {', '.join(sorted(PRESETS))}")
        try:
            d = json.loads(path.read_text())
            if "lobe_direction" in d:
                d["lobe_direction"] = tuple(d["lobe_direction"])
            spec = SyntheticSceneSpec(**d)
        except (json.JSONDecodeError, TypeError, ValueError) as e:
            raise UsageFailure(f"{path}: {e}") from None
    return replace(spec, seed=seed) if seed is not None else spec


def _config(args) -> TrainConfig:
    """Profile defaults, overridden by the TOML file, overridden by ``--seed``."""
    d = dict(PROFILES[args.profile])
    try:
        if args.config:
            with open(args.config, "rb") as f:
                d.update(tomli.load(f))
        if args.seed is not None:
            d["seed"] = args.seed
        return TrainConfig.from_dict(d)
    except (ValueError, TypeError, OSError) as e:
        raise UsageFailure(f"config {args.config or args.profile}: {e}") from None


def _load_pair(run: Path):
    ck = run / "checkpoints" if (run / "checkpoints").is_dir() else run
    try:
        s3 = load_checkpoint(ck / "final_3d.ckpt")
        s2 = load_checkpoint(ck / "final_2d.ckpt")
    except FileNotFoundError as e:
        raise UsageFailure(f"missing checkpoint: {e.filename}") from None
    if not isinstance(s3, GaussianSet) or not isinstance(s2, SurfelSet):
        raise UsageFailure(f"{ck}: checkpoints hold the wrong primitive kinds")
    return s2, s3


def cmd_synth(args) -> int:
    spec = _spec_from_arg(args.spec, args.seed)
    if args.views:
        spec = replace(spec, views=args.views)
    if args.resolution:
        spec = replace(spec, resolution=args.resolution)
    ds = generate_synthetic(spec, args.out)
    print(json.dumps({"out": str(args.out), "views": len(ds.views), "train": len(ds.train), "test": len(ds.test)}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.data)
    res = train(ds, cfg, args.out)
    summary = {
        "warmup_stop": res.warmup_stop,
        "mutual_iters": len(res.mutual_reports),
        "n_3d": len(res.branch_3d.pset),
        "n_2d": len(res.branch_2d.pset),
    }
    if res.mutual_reports:
        last = res.mutual_reports[-1]
        summary.update(L_2D=last.L_2D, L_3D=last.L_3D, L_Z=last.L_Z)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 0


def cmd_render(args) -> int:
    try:
        pset = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise UsageFailure(f"no such checkpoint {args.checkpoint}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    with torch.no_grad():
        for file, cam, _ in load_cameras(args.cameras):
            stem = Path(file).stem
            if isinstance(pset, GaussianSet):
                r = render_3d(pset, cam)
                for key in ("color", "color_tran", "color_ref"):
                    write_png(out / f"{stem}_{key}.png", getattr(r, key).double().clamp(0, 1).numpy())
                write_png(out / f"{stem}_confidence.png", r.confidence.double().numpy())
            else:
                r = render_2d(pset, cam)
                write_png(out / f"{stem}_color.png", r.color.double().clamp(0, 1).numpy())
                write_fmap(out / f"{stem}_normal.fmap", r.normal.numpy())
                write_fmap(out / f"{stem}_median_depth.fmap", r.median_depth.numpy())
            write_fmap(out / f"{stem}_depth.fmap", r.depth.numpy())
            n += 1
    print(json.dumps({"rendered": n, "out": str(out)}))
    return 0


def cmd_mesh(args) -> int:
    s2, s3 = _load_pair(Path(args.run))
    ds = load_dataset(args.data)
    center, side = scene_bounds(ds)
    mesh = fuse_mesh(s2, s3, [v.camera for v in ds.train], center, side, args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh.save_ply(out / "mesh.ply", binary=args.binary)
    report = {"n_vertices": len(mesh.vertices), "n_faces": len(mesh.faces)}
    if ds.gt_mesh is not None and not mesh.is_empty:
        report.update(mesh_metrics(mesh, ds.gt_mesh, args.samples, args.seed or 0))
    write_metrics(out / "metrics.json", report)
    print(json.dumps(report))
    return 0


def _image_dir_metrics(pred: Path, gt: Path) -> dict:
    names = sorted(p.name for p in gt.glob("*.png"))
    if not names:
        raise UsageFailure(f"{gt}: no PNG images")
    per_view = []
    for name in names:
        if not (pred / name).exists():
            raise UsageFailure(f"{pred}: missing {name}")
        a, b = read_png(pred / name), read_png(gt / name)
        if a.shape != b.shape:
            raise UsageFailure(f"{name}: shape {a.shape} vs {b.shape}")
        per_view.append({"file": name, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    mean = {k: float(np.mean([v[k] for v in per_view])) for k in ("psnr", "ssim")}
    return {"per_view": per_view, "mean": mean}


def cmd_eval(args) -> int:
    if args.run:
        if not args.data:
            raise UsageFailure("--run needs --data")
        s2, s3 = _load_pair(Path(args.run))
        ds = load_dataset(args.data)
        report, _ = evaluate(s2, s3, ds, resolution=args.resolution, n_samples=args.samples, seed=args.seed or 0)
    else:
        if not (args.pred and args.gt):
            raise UsageFailure("eval needs --pred and --gt image directories, or --run and --data")
        report = _image_dir_metrics(Path(args.pred), Path(args.gt))
        if args.mesh and args.gt_mesh:
            report["mesh"] = mesh_metrics(TriangleMesh.load_ply(args.mesh), TriangleMesh.load_ply(args.gt_mesh), args.samples, args.seed or 0)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", type=Path, default=None, help="TOML training config")
    common.add_argument("--out", type=Path, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dualsplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--spec", required=True, help=f"preset ({', '.join(sorted(PRESETS))}) or JSON file")
    s.add_argument("--views", type=int)
    s.add_argument("--resolution", type=int)

    t = sub.add_parser("train", parents=[common], help="train both branches")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--profile", choices=sorted(PROFILES), default="default")

    r = sub.add_parser("render", parents=[common], help="render a checkpoint from given cameras")
    r.add_argument("--checkpoint", required=True, type=Path)
    r.add_argument("--cameras", required=True, type=Path)

    m = sub.add_parser("mesh", parents=[common], help="fuse a mesh from a trained run")
    m.add_argument("--run", required=True, type=Path)
    m.add_argument("--data", required=True, type=Path)
    m.add_argument("--resolution", type=int, default=256)
    m.add_argument("--samples", type=int, default=10000)
    m.add_argument("--binary", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="image and mesh metrics")
    e.add_argument("--pred", type=Path)
    e.add_argument("--gt", type=Path)
    e.add_argument("--mesh", type=Path)
    e.add_argument("--gt-mesh", type=Path)
    e.add_argument("--run", type=Path)
    e.add_argument("--data", type=Path)
    e.add_argument("--resolution", type=int, default=256)
    e.add_argument("--samples", type=int, default=10000)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "mesh": cmd_mesh, "eval": cmd_eval}
NEEDS_OUT = {"synth", "train", "render", "mesh"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command in NEEDS_OUT and args.out is None:
        parser.error(f"{args.command} needs --out")
    if args.command != "train" and args.config is not None:
        parser.error("--config only applies to train")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except UsageFailure as e:
        print(f"dualsplat {args.command}: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointFormatError, ConfigError) as e:
        print(f"dualsplat {args.command}: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"dualsplat {args.command}: training diverged: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"dualsplat {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
