"""Command-line entry point.

Exit codes: 0 success, 1 validation/config/usage error, 2 runtime error.
Structured ``key=value`` records go to stdout, human summaries to stderr.
Each command writes ``run_config.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import No2DenseError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(**fields):
    print(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()), flush=True)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v).replace(" ", "_")


def _say(msg):
    print(msg, file=sys.stderr, flush=True)


def _snapshot(out_dir, command, args, **extra):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    argd = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    payload = {"command": command, "args": argd, **extra}
    (out_dir / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .datamodel import generate_synthetic

    m = generate_synthetic(args.n, args.seed, args.out, region_tag=args.region_tag, domain_shift=args.domain_shift)
    _snapshot(args.out, "synth", args, seed=args.seed)
    _emit(cmd="synth", n=len(m.entries), seed=args.seed, out=args.out)
    _say(f"wrote {len(m.entries)} synthetic scenes to {args.out}")


def cmd_split(args):
    from .datamodel import DatasetManifest, entries_from_dir, split_dataset

    data = Path(args.data)
    out = Path(args.out) if args.out else data / "manifest.json"
    generator = None
    if (data / "manifest.json").exists():
        generator = DatasetManifest.from_file(data / "manifest.json").generator
    m = split_dataset(entries_from_dir(data), args.seed, generator=generator, root=data)
    m.save(out)
    c = m.counts()
    _snapshot(out.parent, "split", args, seed=args.seed)
    _emit(cmd="split", seed=args.seed, train=c["train"], val=c["val"], test=c["test"], manifest=out)
    _say(f"split {sum(c.values())} samples: {c['train']}/{c['val']}/{c['test']}")


def cmd_stats(args):
    from .datamodel import DatasetManifest, compute_norm_stats

    mpath = Path(args.manifest)
    m = DatasetManifest.from_file(mpath)
    out = Path(args.out) if args.out else mpath.parent / "norm_stats.json"
    stats = compute_norm_stats(m)
    stats.save(out)
    m.normalization_stats_path = str(out.resolve().relative_to(mpath.parent.resolve())) if out.resolve().is_relative_to(mpath.parent.resolve()) else str(out.resolve())
    m.save(mpath)
    _snapshot(out.parent, "stats", args)
    _emit(cmd="stats", target_mean=stats.target_mean, target_std=stats.target_std, out=out)


def _load_stats_for(manifest, mpath):
    from .datamodel import NormStats

    if manifest.normalization_stats_path:
        p = Path(manifest.normalization_stats_path)
        if not p.is_absolute():
            p = Path(mpath).parent / p
        if p.exists():
            return NormStats.from_file(p)
    return None


def _train_config(args):
    from .trainer import TrainConfig, with_overrides

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "ckpt_dir", None):
        overrides["checkpoint_dir"] = args.ckpt_dir
    return with_overrides(cfg, overrides)


def cmd_train(args):
    import torch

    from .datamodel import DatasetManifest
    from .model import load_checkpoint
    from .trainer import train

    cfg = _train_config(args)
    m = DatasetManifest.from_file(args.manifest)
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved_config.json")

    def log(rec):
        _emit(**rec)

    state = train(cfg, m, stats=_load_stats_for(m, args.manifest), val_split=args.val_split, resume_from=args.resume, log=log)
    ck_hash = load_checkpoint(state.best_checkpoint).manifest["content_hash"]
    _snapshot(out, "train", args, seed=cfg.seed, config=cfg.to_dict(), checkpoint_hash=ck_hash)
    _emit(cmd="train", steps=state.step, epochs=state.epoch, best_val_mae=state.best_val_mae, best_checkpoint=state.best_checkpoint, checkpoint_hash=ck_hash)
    _say(f"best validation MAE {state.best_val_mae:.4f} ug/m3 at {state.best_checkpoint}")


def cmd_eval(args):
    from .datamodel import DatasetManifest
    from .evaluator import evaluate_split, write_report
    from .model import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    report = evaluate_split(ckpt, DatasetManifest.from_file(args.manifest), args.split, args.p)
    out = Path(args.out or Path(args.ckpt) / "eval")
    _, txt = write_report([report], out, stem=f"eval_{args.split}", literature="table1")
    _snapshot(out, "eval", args, checkpoint_hash=ckpt.manifest.get("content_hash"))
    _emit(cmd="eval", split=args.split, n=report.n, mae=report.mae, mse=report.mse, r2=report.r2)
    _say(txt.read_text())


def cmd_eval_region(args):
    from .datamodel import DatasetManifest
    from .evaluator import evaluate_region, write_report
    from .model import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    report = evaluate_region(ckpt, DatasetManifest.from_file(args.manifest), args.region)
    out = Path(args.out or Path(args.ckpt) / "eval")
    _, txt = write_report([report], out, stem=f"region_{report.name}", literature="table2")
    _snapshot(out, "eval-region", args, checkpoint_hash=ckpt.manifest.get("content_hash"))
    _emit(cmd="eval-region", region=report.name, n=report.n, mae=report.mae, mse=report.mse, r2=report.r2)
    _say(txt.read_text())


def _finish_mosaic(args, mosaic, ckpt, cmd):
    from .inference import render_mosaic, save_mosaic

    out = Path(args.out)
    save_mosaic(mosaic, out, {"checkpoint_hash": ckpt.manifest.get("content_hash")})
    if args.render:
        render_mosaic(mosaic, out / args.render)
    _snapshot(out, cmd, args, checkpoint_hash=ckpt.manifest.get("content_hash"))
    _emit(cmd=cmd, passes=mosaic.pass_count, height=mosaic.values.shape[0], width=mosaic.values.shape[1], out=out)


def cmd_infer(args):
    from .inference import infer_dense, load_raster_scene
    from .model import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    P = args.p or ckpt.P
    mosaic = infer_dense(load_raster_scene(args.scene), ckpt, P, batch_size=args.batch_size)
    _finish_mosaic(args, mosaic, ckpt, "infer")


def cmd_infer_pointwise(args):
    from .inference import infer_pointwise, load_raster_scene
    from .model import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    mosaic = infer_pointwise(load_raster_scene(args.scene), ckpt, args.stride, batch_size=args.batch_size)
    _finish_mosaic(args, mosaic, ckpt, "infer-pointwise")


def cmd_sweep(args):
    from .datamodel import DatasetManifest
    from .evaluator import sweep_prediction_space, write_report

    cfg = _train_config(args)
    m = DatasetManifest.from_file(args.manifest)
    ckpts = {}
    for pair in args.ckpts or []:
        k, v = pair.split("=", 1)
        ckpts[int(k)] = v
    rows = sweep_prediction_space(
        cfg, m, args.p, checkpoints=ckpts, split=args.split, scene_shape=(args.scene_size, args.scene_size),
        stats=_load_stats_for(m, args.manifest), log=lambda r: _emit(**r),
    )
    out = Path(args.out)
    write_report([r.report for r in rows], out, stem="sweep", literature="table3", extra_cols={"passes": [r.pass_count for r in rows]})
    _snapshot(out, "sweep", args, seed=cfg.seed, config=cfg.to_dict())
    for r in rows:
        _emit(cmd="sweep", P=r.P, mae=r.report.mae, mse=r.report.mse, r2=r.report.r2, passes=r.pass_count)
    _say((out / "sweep.txt").read_text())


def cmd_render(args):
    from .inference import load_mosaic, render_mosaic

    path = render_mosaic(load_mosaic(args.mosaic), args.out, args.color_scale)
    _emit(cmd="render", out=path)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="no2dense", description="Dense NO2 estimation from satellite raster stacks.")
    p.add_argument("--workers", type=int, default=None, help="cap on intra-op worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="data")
    s.add_argument("--region-tag", default="SYN")
    s.add_argument("--domain-shift", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="70/15/15 split of a sample directory")
    s.add_argument("--data", default="data")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None, help="manifest path (default: <data>/manifest.json)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("stats", help="normalization statistics from the train split")
    s.add_argument("--manifest", default="data/manifest.json")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_stats)

    for name, func in (("train", cmd_train), ("sweep", cmd_sweep)):
        s = sub.add_parser(name)
        s.add_argument("--config", default=None)
        s.add_argument("--manifest", default="data/manifest.json")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--ckpt-dir", default=None)
        s.set_defaults(func=func)
        if name == "train":
            s.add_argument("--val-split", default="val")
            s.add_argument("--resume", default=None)
        else:
            s.add_argument("--p", type=int, nargs="+", required=True)
            s.add_argument("--ckpts", nargs="*", metavar="P=PATH")
            s.add_argument("--split", default="test")
            s.add_argument("--scene-size", type=int, default=1200)
            s.add_argument("--out", default="sweep")

    s = sub.add_parser("eval")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", default="data/manifest.json")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--p", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("eval-region")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--region", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval_region)

    for name, func in (("infer", cmd_infer), ("infer-pointwise", cmd_infer_pointwise)):
        s = sub.add_parser(name)
        s.add_argument("--scene", required=True)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--out", default="mosaic")
        s.add_argument("--render", default=None, metavar="FILE", help="also write an image into --out")
        s.add_argument("--batch-size", type=int, default=1, help="windows per forward pass (1 is batch-invariant)")
        s.set_defaults(func=func)
        if name == "infer":
            s.add_argument("--p", type=int, default=None)
        else:
            s.add_argument("--stride", type=int, required=True)

    s = sub.add_parser("render")
    s.add_argument("--mosaic", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--color-scale", default="viridis")
    s.set_defaults(func=cmd_render)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _say(f"usage error: {exc}")
        return EXIT_USAGE
    if args.workers:
        import torch

        torch.set_num_threads(args.workers)
    try:
        args.func(args)
    except UsageError as exc:
        _say(f"usage error: {exc}")
        return EXIT_USAGE
    except No2DenseError as exc:
        _say(f"error: {exc}")
        return exc.exit_code
    except (OSError, RuntimeError) as exc:
        _say(f"runtime error: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
