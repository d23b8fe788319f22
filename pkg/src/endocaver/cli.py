"""Command-line entry point: ``endocaver {train,eval,infer,degrade,ablate,count}``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .complexity import count_model
from .config import dump_config, load_config
from .data import PairingError
from .degrade import SEVERITIES, degrade_dataset
from .model import VARIANTS, ModelConfig
from .plotting import plot_ablation, plot_loss, plot_metrics
from .train import TrainingDiverged, ablate, evaluate, infer, train

log = logging.getLogger("endocaver")


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand without clobbering each other
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="YAML file with model/train sections")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="unsigned 64-bit seed")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="endocaver", parents=[common],
                                     description="Joint deblurring + polyp segmentation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset root with images/ and masks/ (default: bundled corpus)")
    t.add_argument("--steps", type=int, help="total optimisation steps T")
    t.add_argument("--lr", type=float, help="peak learning rate")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-images", type=int, help="use only the first N images")
    t.add_argument("--variant", choices=sorted(VARIANTS), help="apply an ablation variant to the model config")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--no-plot", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", help="dataset root (default: bundled corpus)")
    e.add_argument("--clean", action="store_true", help="feed clean instead of degraded inputs")
    e.add_argument("--severity", choices=SEVERITIES)
    e.add_argument("--no-plot", action="store_true")

    i = sub.add_parser("infer", parents=[common], help="restore and segment images")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("images", nargs="+", type=Path)

    d = sub.add_parser("degrade", parents=[common], help="write a seeded degraded copy of a dataset")
    d.add_argument("input", type=Path, help="image folder or dataset root")
    d.add_argument("--severity", choices=SEVERITIES, default="moderate")

    a = sub.add_parser("ablate", parents=[common], help="train and compare ablation variants")
    a.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=list(VARIANTS))
    a.add_argument("--data")
    a.add_argument("--steps", type=int)
    a.add_argument("--max-images", type=int)
    a.add_argument("--no-plot", action="store_true")

    c = sub.add_parser("count", parents=[common], help="print parameter and MAC counts")
    c.add_argument("--input-size", type=int, default=224)
    c.add_argument("--paper-scale", action="store_true", help="use the paper-scale widths instead of the toy ones")
    c.add_argument("--variant", choices=sorted(VARIANTS), default="full")
    return parser


def _configs(args):
    model_cfg, train_cfg = load_config(getattr(args, "config", None))
    overrides = {}
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ValueError("--seed must fit in an unsigned 64-bit integer")
        overrides["seed"] = args.seed
        model_cfg.seed = args.seed
    for flag, key in (("data", "train_dir"), ("steps", "total_steps"), ("lr", "lr"),
                      ("batch_size", "batch_size"), ("max_images", "max_images")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    if "total_steps" in overrides and train_cfg.warmup_steps >= overrides["total_steps"]:
        overrides["warmup_steps"] = overrides["total_steps"] // 10
    train_cfg = dataclasses.replace(train_cfg, **overrides)
    return model_cfg, train_cfg


def _out(args, default: str) -> Path:
    out = getattr(args, "out", None) or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args)
    if args.variant:
        model_cfg = model_cfg.variant(args.variant)
    out = _out(args, "runs/train")
    dump_config(model_cfg, train_cfg, out / "config.yaml")
    locos_on = VARIANTS[args.variant][3] if args.variant else True
    res = train(model_cfg, train_cfg, out, resume=args.resume, locos_on=locos_on)
    if not args.no_plot and res.history:
        plot_loss(res.history, out / "loss.png")
    last = res.history[-1] if res.history else None
    print(f"trained {len(res.history)} steps; final loss {last.total:.5f}" if last else "nothing to do")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    _, train_cfg = _configs(args)
    out = _out(args, "runs/eval")
    saved_cfg = ckpt_io.load(args.checkpoint).train_config or {}
    report = evaluate(args.checkpoint, args.data, degraded=not args.clean, out_csv=out / "metrics.csv",
                      seed=train_cfg.seed, severity=args.severity or saved_cfg.get("severity", train_cfg.severity))
    if not args.no_plot:
        plot_metrics(report, out / "metrics.png")
    mean = report.mean()
    print("  ".join(f"{c}={getattr(mean, c):.4f}" for c in ("dice", "iou", "recall", "psnr", "ssim")
                    if getattr(mean, c) is not None))
    print(f"metrics: {out / 'metrics.csv'}")
    return 0


def cmd_infer(args) -> int:
    out = _out(args, "runs/infer")
    for image in args.images:
        paths = infer(args.checkpoint, image, out)
        print(" ".join(str(p) for p in paths.values()))
    return 0


def cmd_degrade(args) -> int:
    out = _out(args, "runs/degraded")
    seed = getattr(args, "seed", None)
    manifest = degrade_dataset(args.input, out, 0 if seed is None else seed, args.severity)
    failed = sum("error" in m for m in manifest)
    print(f"degraded {len(manifest) - failed} images ({failed} unreadable) -> {out}")
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = _configs(args)
    out = _out(args, "runs/ablate")
    rows = ablate(model_cfg, train_cfg, args.variants, out)
    if not args.no_plot:
        plot_ablation(rows, out / "ablation.png")
    for r in rows:
        psnr = "-" if r.psnr is None else f"{r.psnr:.2f}"
        print(f"{r.variant:<18} dice {r.dice:.4f}  psnr {psnr:>6}  params {r.params:>9,}  GMac {r.gmacs:.4f}")
    return 0


def cmd_count(args) -> int:
    if args.paper_scale:
        cfg = ModelConfig.paper_scale()
    else:
        cfg, _ = _configs(args)
    cfg = cfg.variant(args.variant)
    print(count_model(cfg, args.input_size).table())
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "degrade": cmd_degrade,
            "ablate": cmd_ablate, "count": cmd_count}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, PairingError, ckpt_io.CheckpointError, OSError,
            TrainingDiverged) as exc:
        print(f"endocaver {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
