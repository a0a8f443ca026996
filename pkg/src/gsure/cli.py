"""``gsure`` command line: verify-sure, deblur, deconv, denoise, table.

Exit codes: 0 when every check passes, 1 when a check fails, 2 on a
configuration or input error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, ImageFormatError, SchemaMismatchError, UnknownProblemError, WaveletLengthError
from .experiments import EXPERIMENTS, ExperimentConfig, cmd_table, load_config, run_experiment, write_report_rows

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
_INPUT_ERRORS = (ConfigError, ImageFormatError, SchemaMismatchError, UnknownProblemError, WaveletLengthError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsure", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--out", type=Path, help="output directory (default: out/)")
        p.add_argument("--seed", type=int, help="first seed")
        p.add_argument("--trials", type=int, help="number of seeds (Monte-Carlo trials for verify-sure)")
        p.add_argument("--workers", type=int, help="worker processes for the seed fan-out")
    t = sub.add_parser("table", help="merge report CSVs and print aligned tables")
    t.add_argument("reports", nargs="+", type=Path)
    t.add_argument("--out", type=Path, help="directory for table_merged.csv and table.txt")
    return parser


def _config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config, args.command)
    else:
        cfg = ExperimentConfig(args.command)
    overrides = {k: getattr(args, k) for k in ("seed", "trials", "workers") if getattr(args, k) is not None}
    if overrides or args.out is not None:
        cfg = ExperimentConfig(cfg.experiment, overrides.get("seed", cfg.seed), overrides.get("trials", cfg.trials),
                               dict(cfg.params), str(args.out) if args.out is not None else cfg.out,
                               overrides.get("workers", cfg.workers))
    return cfg


def _run(args) -> int:
    if args.command == "table":
        rows, text = cmd_table(args.reports)
        sys.stdout.write(text)
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            write_report_rows(rows, args.out / "table_merged.csv")
            (args.out / "table.txt").write_text(text)
        return EXIT_OK
    cfg = _config(args)
    report = run_experiment(cfg)
    out = Path(cfg.out or "out")
    written = report.write(out)
    for msg in report.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    sys.stdout.write(cmd_table([written[0]])[1])
    for check in report.checks:
        print(check.line())
    print(f"config {cfg.config_hash}, seeds {cfg.seed_range}; wrote {len(written)} files to {out}")
    if not report.passed:
        failing = [c.label for c in report.checks if not c.passed]
        print("failed: " + "; ".join(failing), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
