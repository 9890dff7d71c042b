"""Command-line entry point: ``overfitmeter <subcommand> [--config ...]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .data import DataError
from .harness import INPUT_METHODS, RANK_METRICS, Pipeline, PipelineError, rank_models, read_metrics

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("overfitmeter")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults built in)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="overfitmeter", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-pool", parents=[common], help="train the clean baseline of every pool model")
    sub.add_parser("pmv", parents=[common], help="label-noise retraining, noisy-label evaluation")
    sub.add_parser("ptv", parents=[common], help="label-noise retraining, clean-label evaluation")
    sw = sub.add_parser("sweep", parents=[common], help="input-perturbation sweep of the baselines")
    sw.add_argument("--method", choices=INPUT_METHODS, required=True)
    sub.add_parser("report", parents=[common], help="write results.csv, metrics.csv, plots, manifest")
    rk = sub.add_parser("rank", parents=[common], help="rank models by one metric from metrics.csv")
    rk.add_argument("--metric", choices=sorted(RANK_METRICS), required=True)
    rk.add_argument("--method", default="spatial", choices=INPUT_METHODS,
                    help="perturbation whose max-decrease/SSE is ranked (default: spatial)")
    sub.add_parser("run", parents=[common], help="train-pool, pmv/ptv, all sweeps and report")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    changes = {}
    if args.out:
        changes["output_dir"] = args.out
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        changes["workers"] = args.workers
    return dataclasses.replace(cfg, **changes) if changes else cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    pipe = Pipeline(cfg)
    out = Path(cfg.output_dir)
    try:
        if args.command == "train-pool":
            for row in pipe.train_pool():
                log.info("%s seed %d: train %.4f  val %.4f", row["model_id"], row["seed"],
                         row["train_accuracy"], row["val_accuracy"])
        elif args.command in ("pmv", "ptv"):
            target = out / "curves" / f"{args.command}.csv"
            if target.exists():
                log.info("%s exists; delete it to recompute", target)
            else:
                pipe.label_noise()
                log.info("wrote %s and %s", out / "curves" / "pmv.csv", out / "curves" / "ptv.csv")
        elif args.command == "sweep":
            pipe.sweep(args.method)
            log.info("wrote %s", out / "curves" / f"{args.method}.csv")
        elif args.command == "report":
            for name, path in sorted(pipe.report().items()):
                log.info("%s: %s", name, path)
        elif args.command == "rank":
            metrics = out / "metrics.csv"
            if not metrics.exists():
                print(f"data error: {metrics} not found; run 'report' first", file=sys.stderr)
                return EXIT_DATA
            ranked = rank_models(read_metrics(metrics), args.metric, args.method)
            column = RANK_METRICS[args.metric][0].format(method=args.method)
            for i, rep in enumerate(ranked, 1):
                print(f"{i}. {rep.model_id}  {column}={rep.scalars[column]:.4f}")
        elif args.command == "run":
            pipe.run_all()
            log.info("report written to %s", out)
    except (DataError, PipelineError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyError as exc:
        print(f"data error: {exc.args[0]}", file=sys.stderr)
        return EXIT_DATA

    if pipe.failures:
        for f in pipe.failures:
            print(f"failed: {f.describe()}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
