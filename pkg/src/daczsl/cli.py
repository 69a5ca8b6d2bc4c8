"""Command-line entry point.

Subcommands: ``run`` (full experiment), ``sweep-prompts`` (shot-count sweep
over prompt variants), ``ablate`` (component grid under shared seeds), and
``metrics`` (recompute continual metrics from a persisted accuracy matrix).
Exit codes: 0 success, 1 mid-run failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from . import metrics as mx
from .config import load_config
from .optim import ConfigError
from .runner import compare_ablations, run_experiment, sweep_prompts


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", help="path to the experiment config file")
    parser.add_argument("--seed", action="append", default=[],
                        help="seed or comma list; overrides run.seeds (repeatable)")
    parser.add_argument("--out", default=None,
                        help="output directory; overrides run.out_dir")
    parser.add_argument("--override", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="config override (repeatable)")


def _parse_seeds(items: Sequence[str]) -> list[int]:
    seeds: list[int] = []
    for item in items:
        seeds.extend(int(p) for p in item.split(",") if p.strip() != "")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="daczsl",
        description="Domain-aware continual zero-shot learning experiments "
                    "on synthetic multi-domain data.")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("run", help="train and evaluate over all seeds"))
    sweep = sub.add_parser("sweep-prompts", help="mH vs K for GLP/CWP x end/mid")
    _add_common(sweep)
    sweep.add_argument("--k-list", default=None,
                       help="comma list of shot counts (default from config)")
    _add_common(sub.add_parser("ablate", help="run the ablation grid"))

    metrics_cmd = sub.add_parser(
        "metrics", help="recompute metrics from an accuracy-matrix CSV")
    metrics_cmd.add_argument("matrix", help="path to a matrix_<seed>.csv file")
    return parser


def _recompute_metrics(matrix_path: str) -> int:
    with open(matrix_path, "r", encoding="utf-8") as fh:
        matrix = mx.read_matrix(fh)
    report: dict = {"seed": None, "ablation": None, "mode": None}
    report["LS"] = mx.last_seen(matrix)
    report["mS"] = mx.mean_seen(matrix)
    if len(matrix) >= 2:
        report["mU"] = mx.mean_unseen(matrix)
        report["mH"] = mx.harmonic(report["mS"], report["mU"])
        report["BWT"] = mx.backward_transfer(matrix)
    else:
        report["mU"] = report["mH"] = report["BWT"] = None
    report["mSA"] = report["mUA"] = report["SUAUC"] = None
    sys.stdout.write(mx.report_to_csv(report))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "metrics":
        try:
            return _recompute_metrics(args.matrix)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2

    try:
        cfg = load_config(args.config, overrides=args.override,
                          out_dir=args.out, seeds=_parse_seeds(args.seed))
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "run":
        return run_experiment(cfg)
    if args.command == "sweep-prompts":
        k_list = None
        if args.k_list:
            k_list = [int(p) for p in args.k_list.split(",") if p.strip()]
        return sweep_prompts(cfg, k_list)
    if args.command == "ablate":
        return compare_ablations(cfg)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
