"""Command-line harness: run a configured experiment and write the record table.

Usage:
    localens conjugate --config cfg.json --out results.csv
    localens lorenz96  --config cfg.json --out results.jsonl --format jsonl

Exit codes: 0 success, 1 configuration error (bad flags or config file),
2 experiment or output failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import (
    conjugate_config_from_dict,
    lorenz_config_from_dict,
    override_config,
    run_conjugate_experiment,
    run_lorenz_experiment,
    summarize_records,
    write_records,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="localens", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name, blurb in (
        ("conjugate", "one-step conjugate Gaussian study"),
        ("lorenz96", "cycled Lorenz96 twin experiment"),
    ):
        cmd = sub.add_parser(name, help=blurb)
        cmd.add_argument("--config", required=True, help="JSON config file")
        cmd.add_argument("--out", required=True, help="output records file")
        cmd.add_argument("--format", choices=("csv", "jsonl"), default="csv")
        cmd.add_argument("--seed", type=int, default=None, help="override master_seed")
        cmd.add_argument("--threads", type=int, default=1, help="worker threads")
        cmd.add_argument(
            "--replicates", type=int, default=None,
            help="override n_replicates (conjugate) or n_repeats (lorenz96)",
        )
        cmd.add_argument(
            "--timings", action="store_true",
            help="include wall times in the output (breaks rerun byte-identity)",
        )
    return parser


def _print_summary(records):
    for row in summarize_records(records):
        l_txt = "-" if row["l"] is None else row["l"]
        mean = row["mean_rel_mse_x"]
        mean_txt = "n/a" if mean is None else f"{mean:.4f}"
        line = (
            f"{row['algorithm']:>13}  N={row['N']:<4} k={row['k']:<5} l={l_txt:<3} "
            f"ok={row['n_ok']:<4} failed={row['n_failed']:<3} rel_mse_x={mean_txt}"
        )
        if row["n_failed"]:
            line += f" (incl. failures: {row['mean_rel_mse_x_incl_failures']})"
        print(line)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return 1

    try:
        with open(args.config) as handle:
            data = json.load(handle)
        if args.experiment == "conjugate":
            cfg = conjugate_config_from_dict(data)
            runner = run_conjugate_experiment
        else:
            cfg = lorenz_config_from_dict(data)
            runner = run_lorenz_experiment
        cfg = override_config(cfg, seed=args.seed, replicates=args.replicates)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        records = runner(cfg, threads=max(1, args.threads))
        write_records(records, args.out, fmt=args.format, include_timings=args.timings)
    except Exception as exc:  # noqa: BLE001 - any runtime failure means exit 2
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 2

    _print_summary(records)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
