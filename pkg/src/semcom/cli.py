"""Command-line entry points: train, eval, adapt, report, make-config."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .channel import CHANNEL_KINDS


def _cmd_make_config(args) -> int:
    from .config import PROFILES

    cfg = PROFILES[args.profile]()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.to_json(args.out)
    print(f"wrote {args.profile} profile to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .config import ExperimentConfig
    from .pipeline import Pipeline

    if args.resume:
        pipe = Pipeline.from_checkpoint(args.resume)
    else:
        cfg = ExperimentConfig.from_json(args.config)
        if args.output_dir:
            cfg.output_dir = args.output_dir
        pipe = Pipeline(cfg)
    result = pipe.train()
    last = result["history"][-1]
    print(f"trained {pipe.epoch} epochs; final loss {last['loss_total']:.4f}, accuracy {last['accuracy']:.3f}")
    print(f"checkpoint: {result['checkpoint']}")
    rows = pipe.evaluate(csv_path=Path(pipe.cfg.output_dir) / "metrics.csv")
    print(f"wrote {len(rows)} evaluation rows to {Path(pipe.cfg.output_dir) / 'metrics.csv'}")
    return 0


def _cmd_eval(args) -> int:
    from .lora import load_adapters, model_fingerprint
    from .pipeline import Pipeline

    pipe = Pipeline.from_checkpoint(args.ckpt)
    adapter_set = None
    if args.adapters:
        adapter_set = load_adapters(args.adapters, expected_fingerprint=model_fingerprint(pipe.model))
    rows = pipe.evaluate(
        channels=tuple(args.channels),
        snrs_db=tuple(args.snrs),
        max_samples=args.max_samples,
        split=args.split,
        adapter_set=adapter_set,
        csv_path=args.out,
    )
    for row in rows:
        print(
            f"{row.channel_kind:<12} {row.snr_db:>5.1f} dB  psnr {row.psnr:>6.2f}  "
            f"ssim {row.ssim:.3f}  acc {row.accuracy:.3f}  f1 {row.f1_macro:.3f}"
        )
    if args.out:
        print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_adapt(args) -> int:
    from .pipeline import Pipeline

    pipe = Pipeline.from_checkpoint(args.ckpt)
    aset = pipe.adapt_to_channel(args.channel, fraction=args.fraction, max_epochs=args.max_epochs)
    out_dir = Path(args.out or Path(pipe.cfg.output_dir) / "adapters")
    paths = pipe.save_adapter_library(out_dir)
    print(f"adapted to {args.channel}: {aset.param_count():,} trainable adapter parameters")
    print(f"validation loss history: {[round(v, 4) for v in aset.val_history]}")
    for path in paths:
        print(f"saved {path}")
    return 0


def _cmd_report(args) -> int:
    from .report import report

    written = report(args.inputs, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semcom", description="Task-adaptive semantic image transmission")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-config", help="write a named profile as a JSON config")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_config)

    p = sub.add_parser("train", help="train from a config file (or resume a checkpoint)")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="SNR sweep evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--channels", nargs="+", choices=CHANNEL_KINDS, default=["awgn"])
    p.add_argument("--snrs", nargs="+", type=float, default=[0, 5, 10, 15, 20, 25, 30])
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--max-samples", type=int, default=1024)
    p.add_argument("--adapters", help="adapter file to attach during evaluation")
    p.add_argument("--out", help="metrics CSV output path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("adapt", help="train channel-specific adapters on a small sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--channel", required=True, choices=CHANNEL_KINDS)
    p.add_argument("--fraction", type=float, default=0.01)
    p.add_argument("--max-epochs", type=int, default=5)
    p.add_argument("--out", help="directory for the adapter library")
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("report", help="plots and summary from metrics/trajectory CSVs")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.resume and not args.config:
        parser.error("train needs --config or --resume")
    try:
        return args.func(args)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
