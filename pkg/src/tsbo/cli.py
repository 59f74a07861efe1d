"""Command-line entry point: run, ablate, eval-gen, version."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from tsbo import __version__
from tsbo.config import METHODS, load_config
from tsbo.errors import ConfigError
from tsbo.runner import (
    NumericFailure,
    eval_generalization,
    format_table,
    lambda_sweep,
    run_ablation_suite,
    run_experiment,
    seeds_for,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsbo", description="Teacher-student Bayesian optimization runner")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one configuration")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--out")

    ablate = sub.add_parser("ablate", help="run the ablation variants over n_seeds seeds")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--lambda-sweep", action="store_true", help="sweep the feedback weight instead")

    gen = sub.add_parser("eval-gen", help="query-GP NLL with and without pseudo labels")
    gen.add_argument("--config", required=True)

    sub.add_parser("version", help="print the package version")
    return parser


def _overrides(args) -> dict:
    kw = {}
    for key in ("seed", "method", "out"):
        value = getattr(args, key, None)
        if value is not None:
            kw[key] = value
    return kw


def _run(args) -> int:
    cfg = load_config(args.config).with_(**_overrides(args))
    result = run_experiment(cfg, write=True)
    print(f"best={result.best_observed!r} evals={result.n_evals}")
    return EXIT_OK


def _ablate(args) -> int:
    cfg = load_config(args.config)
    table = lambda_sweep(cfg) if args.lambda_sweep else run_ablation_suite(cfg)
    print(format_table(table))
    return EXIT_OK


def _eval_gen(args) -> int:
    cfg = load_config(args.config)
    reports = {}
    for seed in seeds_for(cfg):
        run_cfg = cfg.with_(seed=seed)
        reports[seed] = eval_generalization(run_cfg, run_experiment(run_cfg))
    print(json.dumps(reports, indent=2))
    return EXIT_OK


COMMANDS = {"run": _run, "ablate": _ablate, "eval-gen": _eval_gen}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "version":
        print(__version__)
        return EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
