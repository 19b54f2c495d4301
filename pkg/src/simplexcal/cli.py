"""Command-line entry point.

Subcommands: pretrain, calibrate, evaluate, ood, tune-beta. Every command
takes ``-c/--config`` (JSON) and any number of ``--set dotted.path=value``
overrides. Exit codes: 0 success, 2 usage or config problem, 3 numeric
divergence.
"""

import argparse
import sys

from .errors import ArgumentError, CalibrationError, ConfigError, DataError
from .experiment import (
    METHODS,
    load_config,
    run_calibrate,
    run_evaluate,
    run_ood,
    run_pretrain,
    run_tune_beta,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", required=True, help="experiment config (JSON)")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
        help="override a config field, e.g. --set mixup.beta=0.7 or --set beta_grid='[0.5,1.0]'",
    )
    parser.add_argument("--output-dir", help="override config output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simplexcal",
        description="Accuracy-preserving confidence calibration on the probability simplex.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the classifier for each trial seed")
    _add_common(p)

    p = sub.add_parser("calibrate", help="calibrate pretrained checkpoints")
    _add_common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("checkpoints", nargs="*", help="pretrained checkpoints (default: discover)")

    p = sub.add_parser("evaluate", help="aggregate metrics over calibrated checkpoints")
    _add_common(p)
    p.add_argument("checkpoints", nargs="+", help="checkpoints to score")

    p = sub.add_parser("ood", help="out-of-distribution detection report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="calibrated checkpoint")

    p = sub.add_parser("tune-beta", help="run the mixup beta grid on the first trial seed")
    _add_common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors already
        return int(exc.code or 0)

    try:
        config = load_config(args.config, args.overrides)
        if args.output_dir:
            import dataclasses

            config = dataclasses.replace(config, output_dir=args.output_dir)
        if args.command == "pretrain":
            paths = run_pretrain(config)
            print("\n".join(paths))
        elif args.command == "calibrate":
            paths = run_calibrate(config, args.method, args.checkpoints or None)
            print("\n".join(paths))
        elif args.command == "evaluate":
            _, table = run_evaluate(config, args.checkpoints)
            print(table, end="")
        elif args.command == "ood":
            report = run_ood(config, args.checkpoint)
            for name, vals in report["detectors"].items():
                print(f"{name}: AUROC {vals['auroc']:.4f}  AUPR {vals['aupr']:.4f}")
        elif args.command == "tune-beta":
            payload = run_tune_beta(config)
            print(f"chosen beta: {payload['chosen_beta']}")
        return EXIT_OK
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ArgumentError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
