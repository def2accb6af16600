"""Command-line entry point.

Subcommands: train, evaluate, transfer-eval, oracle-check, baseline-scalar.
Exit codes: 0 success, 1 usage error, 2 validation error, 3 check-suite
failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .errors import LexidriveError
from .harness import RunConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_SUITE_FAILURE = 3


def _load_config(args) -> RunConfig:
    config = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _add_common(parser, checkpoint=False, episodes=False):
    parser.add_argument("--config", type=Path, help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", type=Path, default=Path("runs/out"),
                        help="output directory")
    if checkpoint:
        parser.add_argument("--checkpoint", type=Path, required=True,
                            help="trained checkpoint (.npz)")
    if episodes:
        parser.add_argument("--episodes", type=int, default=None,
                            help="evaluation episode count")
        parser.add_argument("--deterministic", action="store_true",
                            help="greedy stack policy (always on; accepted "
                                 "for interface stability)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lexidrive",
        description="Multi-objective lexicographic DQN driving toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train", help="train a model per config"))
    _add_common(sub.add_parser("baseline-scalar",
                               help="train the weighted-sum scalar baseline"))
    _add_common(sub.add_parser("evaluate", help="violation rates on the "
                                                "training map"),
                checkpoint=True, episodes=True)
    _add_common(sub.add_parser("transfer-eval", help="zero-shot ring-road "
                                                     "evaluation"),
                checkpoint=True, episodes=True)
    oc = sub.add_parser("oracle-check", help="tabular correctness suite")
    oc.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    oc.add_argument("--seed", type=int, default=0)
    oc.add_argument("--instances", type=int, default=50)
    oc.add_argument("--out", type=Path, default=None)
    return parser


def _print_report(report, label: str) -> None:
    print(f"{label}: episodes={report.episodes}  {report.row()}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command in ("train", "baseline-scalar"):
            config = _load_config(args)
            if args.command == "baseline-scalar":
                config = replace(config, model="dqn")
            checkpoint = harness.run_training(config, args.out)
            print(f"checkpoint written to {checkpoint}")
        elif args.command == "evaluate":
            config = _load_config(args)
            report = harness.run_evaluation(
                config, args.checkpoint,
                args.episodes or config.eval_episodes)
            _print_report(report, "evaluation")
        elif args.command == "transfer-eval":
            config = _load_config(args)
            report = harness.run_transfer_eval(config, args.checkpoint,
                                               args.episodes)
            _print_report(report, "transfer")
        elif args.command == "oracle-check":
            report = harness.run_oracle_check(args.instances, seed=args.seed)
            print(json.dumps(report, indent=2))
            if args.out:
                args.out.parent.mkdir(parents=True, exist_ok=True)
                args.out.write_text(json.dumps(report, indent=2))
            if not report["ok"]:
                return EXIT_SUITE_FAILURE
    except LexidriveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
