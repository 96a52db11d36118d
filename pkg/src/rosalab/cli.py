"""Command-line surface: train, analyze, params, gradcheck, ablate.

Exit codes: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import sys

from .analysis import (
    ABLATION_VARIANTS,
    analyze_checkpoint,
    format_gradcheck_report,
    format_param_report,
    gradcheck_report,
    param_report,
    run_ablation,
)
from .config import load_config
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    InputError,
    IoError,
    NumericError,
    ScoringError,
    ShapeError,
    TrainingAbort,
)
from .train import run_training

_STAGES = {"pre": "pre_rope", "post": "post_rope", "pre_rope": "pre_rope", "post_rope": "post_rope"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rosalab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training configuration")
    p.add_argument("--config", required=True)

    p = sub.add_parser("analyze", help="dump Q/K head activation norms to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--which", choices=["q", "k"], default="q")
    p.add_argument("--stage", choices=sorted(_STAGES), default="pre")

    p = sub.add_parser("params", help="report parameter budget for a configuration")
    p.add_argument("--config", required=True)

    p = sub.add_parser("gradcheck", help="check analytic gradients against finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("ablate", help="run one ablation variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", choices=ABLATION_VARIANTS, required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            report = run_training(load_config(args.config))
            print(f"run_dir = {report.run_dir}")
            print(f"final_loss = {report.final_loss!r}")
            print(f"final_accuracy = {report.final_accuracy!r}")
        elif args.command == "analyze":
            rows = analyze_checkpoint(
                args.ckpt, args.sample, args.out, which=args.which, stage=_STAGES[args.stage]
            )
            print(f"wrote {len(rows)} rows to {args.out}")
        elif args.command == "params":
            print(format_param_report(param_report(load_config(args.config))), end="")
        elif args.command == "gradcheck":
            report = gradcheck_report(load_config(args.config), tol=args.tol)
            print(format_gradcheck_report(report), end="")
            if not report["passed"]:
                return 1
        elif args.command == "ablate":
            report = run_ablation(load_config(args.config), args.variant)
            print(f"run_dir = {report.run_dir}")
            print(f"trainable_params = {report.trainable_params}")
            print(f"final_loss = {report.final_loss!r}")
    except (ConfigError, InputError, ContractError, ShapeError, ScoringError, NumericError, TrainingAbort) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (IoError, CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
