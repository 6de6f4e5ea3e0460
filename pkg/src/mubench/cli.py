"""Command-line front end for the benchmark pipeline.

    mubench prepare    --desk
    mubench train-refs --desk
    mubench sweep      --desk [--method ft] [--jobs 4]
    mubench unlearn    --desk [--method ft] [--jobs 4]
    mubench evaluate   --desk
    mubench attack-lira --desk --method ft
    mubench report     --desk

Exit codes: 0 success, 1 partial (some method ended in the failure group),
2 configuration or I/O problem.  --jobs parallelizes across methods with one
worker thread per method; wall-clock efficiency timing forces jobs back to 1
so runtimes are never measured under contention.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor

from . import pipeline
from .config import BenchConfig, load_config
from .errors import ConfigError, MubenchError


def _parse_seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mubench",
                                 description="benchmark harness for machine unlearning methods")
    sub = ap.add_subparsers(dest="command", required=True)
    specs = (
        ("prepare", "split the dataset and start a manifest"),
        ("train-refs", "train original and retrained reference models"),
        ("sweep", "random-search method hyperparameters"),
        ("unlearn", "finalize methods with their best hyperparameters"),
        ("evaluate", "score everything into the report tables"),
        ("attack-lira", "per-sample shadow-model membership attack"),
        ("report", "condense evaluation artifacts into one summary"),
    )
    for name, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="key = value config file")
        p.add_argument("--desk", action="store_true", help="use the reduced-scale preset")
        p.add_argument("--seeds", metavar="LIST", help="override seeds, e.g. 0,1,2")
        p.add_argument("--force", action="store_true", help="redo the phase even if complete")
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="method-level worker threads")
        if name in ("sweep", "unlearn", "attack-lira"):
            p.add_argument("--method", metavar="ID", help="single method id (default: all configured)")
    return ap


def _per_method(args, cfg: BenchConfig, fn) -> int:
    methods = [args.method] if args.method else list(cfg.methods)
    if not methods:
        print("no methods configured", file=sys.stderr)
        return 0
    jobs = args.jobs if cfg.rte_clock == "steps" else 1
    if jobs > 1 and len(methods) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            codes = list(pool.map(lambda m: fn(cfg, m, force=args.force), methods))
    else:
        codes = [fn(cfg, m, force=args.force) for m in methods]
    return max(codes)


def _dispatch(args, cfg: BenchConfig) -> int:
    if args.command == "prepare":
        return pipeline.cmd_prepare(cfg, force=args.force)
    if args.command == "train-refs":
        return pipeline.cmd_train_refs(cfg, force=args.force)
    if args.command == "sweep":
        return _per_method(args, cfg, pipeline.cmd_sweep)
    if args.command == "unlearn":
        return _per_method(args, cfg, pipeline.cmd_unlearn)
    if args.command == "evaluate":
        return pipeline.cmd_evaluate(cfg, force=args.force)
    if args.command == "attack-lira":
        if not args.method:
            raise ConfigError("attack-lira needs --method (shadow ensembles are per method)")
        return pipeline.cmd_attack_lira(cfg, args.method, force=args.force)
    return pipeline.cmd_report(cfg, force=args.force)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.seeds:
            overrides["seeds"] = _parse_seeds(args.seeds)
        cfg = load_config(args.config, desk=args.desk, **overrides)
        return _dispatch(args, cfg)
    except (MubenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
