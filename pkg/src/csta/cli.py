"""Command-line entry point: ``csta {gen,train,eval,summarize,macs}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .crossval import cross_validate, fold_partition
from .dataio import DatasetError, gen_synthetic, load_dataset, save_dataset
from .macs import ShapeError, model_macs
from .model import ModelConfig, load_checkpoint, predict, save_checkpoint
from .shots import segment_video, shot_scores, summarize
from .trainer import evaluate_model, mean_metrics

log = logging.getLogger("csta")


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is 2."""


def _setup_logging() -> None:
    level = os.environ.get("CSTA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _resolve(args, with_train: bool = False) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    apply_overrides(cfg, "run", {"data": getattr(args, "data", None), "out": getattr(args, "out", None),
                                 "seed": getattr(args, "seed", None), "jobs": getattr(args, "jobs", None)})
    apply_overrides(cfg, "model", {k: getattr(args, k, None) for k in
                                   ("reduction", "softmax_axes", "key_value", "positional", "cls_token", "skip")})
    if with_train:
        apply_overrides(cfg, "train", {"epochs": args.epochs, "learning_rate": args.lr, "weight_decay": args.wd,
                                       "dropout": args.dropout, "batch_size": args.batch_size})
        apply_overrides(cfg, "eval", {"folds": args.folds, "repeats": args.repeats})
    return cfg


def _dataset(cfg: RunConfig):
    if not cfg.data:
        raise CliError("no dataset given (use --data or [run] data)")
    if not Path(cfg.data).exists():
        raise CliError(f"dataset directory {cfg.data} does not exist")
    return load_dataset(cfg.data)


def _outdir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise CliError("no output directory given (use --out or [run] out)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config(cfg: RunConfig, dim: int) -> ModelConfig:
    if "dim" in cfg.model and cfg.model["dim"] != dim:
        raise CliError(f"config sets model dim {cfg.model['dim']} but the dataset has D={dim}")
    try:
        return cfg.model_config(dim)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid model settings: {exc}") from None


# -- commands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    if not args.out:
        raise CliError("gen needs --out")
    ds = gen_synthetic(args.videos, (args.frames_min, args.frames_max), args.dim, args.segments, args.annotators,
                       args.noise, args.seed, args.kind, name=args.name)
    root = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} videos (D={ds.dim}) to {root}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, with_train=True)
    ds = _dataset(cfg)
    out = _outdir(cfg)
    model_config = _model_config(cfg, ds.dim)
    train_cfg = cfg.train_config()
    seeds = [cfg.seed + r for r in range(cfg.eval.repeats)]
    (out / "config.ini").write_text(cfg.to_ini(ds.dim))
    with open(out / "partition.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repeat", "seed", "fold", "test_videos"])
        for r, seed in enumerate(seeds):
            for k, idx in enumerate(fold_partition(len(ds), cfg.eval.folds, seed)):
                w.writerow([r, seed, k, " ".join(ds.videos[i].id for i in idx)])
    report, splits = cross_validate(ds, model_config, train_cfg, cfg.eval.folds, cfg.eval.repeats, seeds,
                                    jobs=cfg.jobs, budget_ratio=cfg.eval.budget_ratio,
                                    kts_penalty=cfg.eval.kts_penalty, keep_models=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repeat", "fold", "epoch", "train_loss", "test_tau", "test_rho"])
        for fold, split in zip(report.folds, splits):
            for e in split.curve:
                w.writerow([fold.repeat, fold.fold, e.epoch, repr(e.train_loss), repr(e.test_tau), repr(e.test_rho)])
            save_checkpoint(ckpt_dir / f"repeat{fold.repeat}_fold{fold.fold}.ckpt", split.model(),
                            {"repeat": fold.repeat, "fold": fold.fold, "seed": fold.seed,
                             "best_epoch": split.best_epoch, "test_videos": fold.test_ids,
                             "test_tau": fold.tau, "test_rho": fold.rho})
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ds = _dataset(cfg)
    model, meta = _checkpoint(args.checkpoint, ds.dim)
    videos = ds.videos
    if args.test_only and "test_videos" in meta:
        wanted = set(meta["test_videos"])
        videos = [v for v in videos if v.id in wanted]
    per_video = evaluate_model(model, videos, cfg.eval.budget_ratio, cfg.eval.kts_penalty)
    tau, rho = mean_metrics(per_video)
    lines = [f"{vid}: tau {t:+.4f} rho {r:+.4f}" for vid, (t, r) in per_video.items()]
    lines.append(f"mean: tau {tau:+.4f} rho {rho:+.4f}")
    text = "\n".join(lines) + "\n"
    if cfg.out:
        out = _outdir(cfg)
        (out / "config.ini").write_text(cfg.to_ini(ds.dim))
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["video", "tau", "rho"])
            for vid, (t, r) in per_video.items():
                w.writerow([vid, repr(t), repr(r)])
            w.writerow(["mean", repr(tau), repr(rho)])
        (out / "eval.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_summarize(args) -> int:
    cfg = _resolve(args)
    ds = _dataset(cfg)
    out = _outdir(cfg)
    model, _ = _checkpoint(args.checkpoint, ds.dim)
    (out / "config.ini").write_text(cfg.to_ini(ds.dim))
    with open(out / "summaries.csv", "w", newline="") as fh, open(out / "shots.csv", "w", newline="") as sh:
        mw = csv.writer(fh, lineterminator="\n")
        sw = csv.writer(sh, lineterminator="\n")
        mw.writerow(["video", "n_frames", "n_selected", "mask"])
        sw.writerow(["video", "shot", "start", "end", "score", "selected"])
        for v in ds.videos:
            scores = predict(model, v.features)
            seg = segment_video(v.features, v.change_points, cfg.eval.kts_penalty)
            sel = summarize(scores, seg, cfg.eval.budget_ratio)
            mw.writerow([v.id, v.n_frames, sel.n_selected, "".join(map(str, sel.mask.tolist()))])
            for i, ((a, b), s) in enumerate(zip(seg.bounds, shot_scores(scores, seg))):
                sw.writerow([v.id, i, a, b, repr(float(s)), int(i in sel.shots)])
            print(f"{v.id}: {sel.n_selected}/{v.n_frames} frames, shots {list(sel.shots)}")
    return 0


def cmd_macs(args) -> int:
    cfg = _resolve(args)
    if args.checkpoint:
        model, _ = _checkpoint(args.checkpoint, None)
        model_config = model.config
    else:
        dim = args.dim or cfg.model.get("dim")
        if not dim:
            raise CliError("macs needs --dim, a [model] dim, or --checkpoint")
        model_config = _model_config(cfg, dim)
    try:
        report = model_macs(model_config, args.frames)
    except ShapeError as exc:
        raise CliError(f"shape error: {exc}") from None
    if cfg.out:
        out = _outdir(cfg)
        (out / "macs.csv").write_text(report.to_csv())
        (out / "macs.txt").write_text(report.to_text())
    sys.stdout.write(report.to_csv() if args.csv else report.to_text())
    return 0


def _checkpoint(path, dim):
    if not path:
        raise CliError("--checkpoint is required")
    if not Path(path).is_file():
        raise CliError(f"checkpoint {path} not found")
    try:
        model, meta = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}") from None
    if dim is not None and model.config.dim != dim:
        raise CliError(f"checkpoint expects D={model.config.dim}, dataset has D={dim}")
    return model, meta


# -- parser ---------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key = value config file with [run]/[model]/[train]/[eval] sections")
    p.add_argument("--jobs", type=int, help="parallel folds (results are ordered the same either way)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--reduction", type=int, help="CNN reduction ratio r (power of two)")
    g.add_argument("--softmax-axes", dest="softmax_axes", choices=["td", "t", "d", "none"])
    g.add_argument("--key-value", dest="key_value", type=_bool)
    g.add_argument("--positional", type=_bool)
    g.add_argument("--cls-token", dest="cls_token", type=_bool)
    g.add_argument("--skip", type=_bool)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csta", description="CNN spatiotemporal attention video summarisation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--frames-min", type=int, default=36)
    p.add_argument("--frames-max", type=int, default=44)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--segments", type=int, default=5)
    p.add_argument("--annotators", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--kind", choices=["scores", "summaries"], default="scores")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="cross-validated training")
    _common(p)
    _model_flags(p)
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--wd", type=float)
    g.add_argument("--dropout", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--folds", type=int)
    g.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-only", action="store_true", help="only the checkpoint's held-out videos")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summarize", help="write knapsack summaries for every video")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("macs", help="count multiply-accumulates")
    _common(p, data=False)
    _model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dim", type=int)
    p.add_argument("--frames", type=int, required=True, help="frames per video (T)")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_macs)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
