"""Command line entry point: ``selbias {tls,simulate,tune-r,recommend-eval}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import simbench
from .errors import ConfigError, DataError, DegenerateInputError, NumericalError, SelbiasError
from .estimator import SBConfig
from .experiments import (
    ExperimentConfig,
    cmd_recommend_eval,
    cmd_simulate,
    cmd_tls,
    cmd_tune_r,
    read_config_file,
)
from .ratings import ingest

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("selbias")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--format", choices=("dat", "csv"), default=None,
                   help="dataset format; inferred from the extension by default")
    p.add_argument("--scale", choices=("half", "integer"), default=None,
                   help="rating grid: half stars 0.5-5 or integers 1-5")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None, help="key = value file; flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _eval_options(p):
    p.add_argument("dataset")
    p.add_argument("--train-fraction", type=float, default=None)
    p.add_argument("--rank", type=int, default=None, help="SVD rank of the user features")
    p.add_argument("--neighborhood-size", type=int, default=None)
    p.add_argument("--slope", type=float, default=None, help="selection-bias slope a")
    p.add_argument("--slope-subsets", type=int, default=None,
                   help="estimate a as the median slope of this many random user subsets")
    p.add_argument("--subset-users", type=int, default=None)
    p.add_argument("--r", type=float, default=None, help="regularization weight")
    p.add_argument("--fallback", type=float, default=None)
    p.add_argument("--eval-users", type=int, default=None)
    p.add_argument("--n-values", type=_ints, default=None)
    p.add_argument("--tau-values", type=_floats, default=None)
    p.add_argument("--weighted", action="store_true", default=None,
                   help="weight neighbor ratings by cosine similarity")
    p.add_argument("--strict", action="store_true", default=None,
                   help="fail when an SB fit does not reach the gradient tolerance")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="selbias", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tls", parents=[common], help="fit the popularity/rating line")
    p.add_argument("dataset")
    p.add_argument("--subsets", type=int, default=0, help="number of random user subsets")
    p.add_argument("--subset-users", type=int, default=100)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo experiments on synthetic data")
    p.add_argument("--experiment", choices=("recovery", "sweep-r", "sweep-a"), required=True)
    p.add_argument("--n", type=_ints, default=None, help="sample sizes (recovery) or the fixed n (sweeps)")
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--theta", type=_floats, default=list(simbench.DEFAULT_THETA))
    p.add_argument("--a-star", type=float, default=0.35)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--sigma-b", type=float, default=1.0)
    p.add_argument("--a", type=float, default=None, help="slope used by the estimator (default a-star)")
    p.add_argument("--r", type=float, default=7.0)
    p.add_argument("--values", type=_floats, default=None, help="r grid (sweep-r) or a grid (sweep-a)")

    p = sub.add_parser("recommend-eval", parents=[common], help="neighborhood CF evaluation of SB, LS, popularity")
    _eval_options(p)

    p = sub.add_parser("tune-r", parents=[common], help="choose r by validation RMSE")
    _eval_options(p)
    p.add_argument("--grid", type=_floats, required=True)
    p.add_argument("--validation-users", type=int, default=100)
    return parser


_CONFIG_FLAGS = ("format", "scale", "seed", "threads", "train_fraction", "rank", "neighborhood_size",
                 "slope", "slope_subsets", "subset_users", "r", "fallback", "eval_users", "n_values",
                 "tau_values", "weighted", "strict")


def resolve_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for key in _CONFIG_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            values[key] = tuple(value) if isinstance(value, list) else value
    if getattr(args, "dataset", None):
        values["dataset"] = args.dataset
    return ExperimentConfig(**values)


def _load(config: ExperimentConfig):
    return ingest(config.dataset, config.format, config.scale)


def _run(args) -> int:
    config = resolve_config(args)
    out = args.out
    if args.command == "tls":
        table = _load(config)
        result = cmd_tls(table, args.subsets, args.subset_users, config.seed, out,
                         dict(config.as_dict(), subsets=args.subsets, subset_users=args.subset_users))
        print(json.dumps(result, indent=2, sort_keys=True))
    elif args.command == "simulate":
        sim = simbench.SimConfig(theta_star=tuple(args.theta), a_star=args.a_star, sigma=args.sigma,
                                 sigma_b=args.sigma_b, seed=config.seed)
        sb = SBConfig(slope=args.a if args.a is not None else args.a_star, r=args.r)
        if args.experiment == "recovery":
            values = args.n or [20, 50, 100, 200]
        else:
            if args.n:
                if len(args.n) != 1:
                    raise ConfigError("sweeps take a single --n")
                sim = dataclasses.replace(sim, n=args.n[0])
            if not args.values:
                raise ConfigError(f"--values is required for {args.experiment}")
            values = args.values
        summary = cmd_simulate(args.experiment, sim, sb, values, args.reps, out)
        print(json.dumps(summary, indent=2, sort_keys=True))
    elif args.command == "recommend-eval":
        reports = cmd_recommend_eval(_load(config), config, out)
        headline = {name: {"RMSE": rep.aggregate["rmse"],
                         **{f"P@N{n}": rep.aggregate["p_at_n"].get(n) for n in (3, 14) if n in config.n_values},
                         **{f"P@tau{t:g}": rep.aggregate["p_at_tau"].get(t) for t in (4.0,) if t in config.tau_values}}
                  for name, rep in reports.items()}
        print(json.dumps(headline, indent=2))
    elif args.command == "tune-r":
        best, curve = cmd_tune_r(_load(config), config, args.grid, args.validation_users, out)
        print(json.dumps({"best_r": best, "curve": {repr(k): v for k, v in curve.items()}}, indent=2))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"selbias: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DegenerateInputError) as exc:
        print(f"selbias: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"selbias: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SelbiasError as exc:
        print(f"selbias: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
