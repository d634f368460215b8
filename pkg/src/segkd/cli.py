"""Command line entry point.

    segkd gen-synthetic    --config run.yaml
    segkd cache-embeddings --config run.yaml
    segkd distill-encoder  --config run.yaml [--resume CKPT]
    segkd finetune-decoder --config run.yaml [--encoder-checkpoint CKPT] [--resume CKPT]
    segkd evaluate         --config run.yaml --checkpoint CKPT
    segkd report           --config run.yaml

Common flags: --output-dir and --seed override the config; --dry-run
validates the config, echoes the effective config, and prints the plan
without computing anything. Exit codes: 0 success, 1 runtime failure,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import parse_config, write_effective_config
from .errors import ConfigError, SegkdError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segkd",
        description="two-phase distillation of promptable segmentation models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="run configuration (YAML)")
        p.add_argument("--output-dir", default=None, help="override output_dir")
        p.add_argument("--seed", type=int, default=None, help="override seed")
        p.add_argument("--dry-run", action="store_true",
                       help="validate the config and print the plan only")

    add_common(sub.add_parser("gen-synthetic", help="materialize the synthetic dataset"))
    add_common(sub.add_parser("cache-embeddings", help="precompute teacher embeddings"))

    p = sub.add_parser("distill-encoder", help="phase 1: train the student encoder")
    add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")

    p = sub.add_parser("finetune-decoder", help="phase 2: train the prompt decoder")
    add_common(p)
    p.add_argument("--encoder-checkpoint", default=None,
                   help="phase-1 checkpoint (default: <output_dir>/encoder/checkpoint_best)")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")

    p = sub.add_parser("evaluate", help="dice evaluation on the test split")
    add_common(p)
    p.add_argument("--checkpoint", required=True, help="phase-2 checkpoint directory")

    add_common(sub.add_parser("report", help="tables, figures, and reference comparison"))
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s | %(levelname)s | %(message)s",
                        datefmt="%H:%M:%S")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        spec = parse_config(
            args.config,
            overrides={"output_dir": args.output_dir, "seed": args.seed},
        )
        write_effective_config(spec)
        if args.dry_run:
            _dispatch(args, spec)
            return 0
        with pipeline.run_lock(spec.output_dir):
            _dispatch(args, spec)
        return 0
    except ConfigError as exc:
        print(f"segkd: config error: {exc}", file=sys.stderr)
        return 2
    except (SegkdError, OSError) as exc:
        print(f"segkd: error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args: argparse.Namespace, spec) -> None:
    if args.command == "gen-synthetic":
        pipeline.run_gen_synthetic(spec, dry_run=args.dry_run)
    elif args.command == "cache-embeddings":
        pipeline.run_cache_embeddings(spec, dry_run=args.dry_run)
    elif args.command == "distill-encoder":
        pipeline.run_distill_encoder(spec, dry_run=args.dry_run, resume=args.resume)
    elif args.command == "finetune-decoder":
        pipeline.run_finetune_decoder(
            spec, dry_run=args.dry_run,
            encoder_checkpoint=args.encoder_checkpoint, resume=args.resume,
        )
    elif args.command == "evaluate":
        pipeline.run_evaluate(spec, checkpoint=args.checkpoint, dry_run=args.dry_run)
    elif args.command == "report":
        pipeline.run_report(spec, dry_run=args.dry_run)
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
