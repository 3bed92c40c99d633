"""Command line: ``metaweight run | sweep | diagnose``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (
    SCHEMES,
    ConfigError,
    ExperimentConfig,
    SweepConfig,
    emit_convergence_diagnostics,
    load_config_dict,
    run_bias_sweep,
    run_experiment,
)
from .optim import History


def _fail(code: int, kind: str, msg: str) -> int:
    print(json.dumps({"error": kind, "message": msg}), file=sys.stderr)
    return code


def _experiment_config(args) -> ExperimentConfig:
    d = load_config_dict(args.config)
    for key in ("seed", "scheme", "out"):
        value = getattr(args, key, None)
        if value is not None:
            d[key] = value
    return ExperimentConfig.from_dict(d)


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    report, _ = run_experiment(cfg)
    print(json.dumps({"balanced_accuracy": report.balanced_accuracy, "overall_accuracy": report.overall_accuracy}))
    return 0


def cmd_sweep(args) -> int:
    d = load_config_dict(args.config)
    sweep = SweepConfig.from_dict(d)
    if args.workers is not None:
        sweep.workers = args.workers
    base = _experiment_config(args)
    rows = run_bias_sweep(sweep, base)
    for r in rows:
        if r["kind"] == "summary":
            means = {k: round(v, 4) for k, v in r.items() if k.startswith("mean_")}
            print(json.dumps({"proportion": r["proportion"], **means}))
    return 0


def cmd_diagnose(args) -> int:
    path = Path(args.history)
    try:
        history = History.from_jsonl(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        return _fail(2, "HistoryError", str(e))
    out = Path(args.out) if args.out else path.with_name("diagnostics.csv")
    emit_convergence_diagnostics(history, out)
    print(str(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaweight", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one scheme and write report.json, history.jsonl, confusion.csv")
    run.add_argument("--config", required=True, help="JSON file or preset name")
    run.add_argument("--seed", type=int)
    run.add_argument("--scheme", choices=SCHEMES)
    run.add_argument("--out")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="dominant-class proportion sweep, writes sweep.csv")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--out")
    sweep.add_argument("--workers", type=int)
    sweep.set_defaults(func=cmd_sweep)

    diag = sub.add_parser("diagnose", help="convergence diagnostics from a history.jsonl")
    diag.add_argument("--history", required=True)
    diag.add_argument("--out")
    diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail(2, "ConfigError", str(e))
    except ValueError as e:
        return _fail(1, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
