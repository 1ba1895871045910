"""End-to-end experiments behind the command line: bias fit, simulations, recommendation evaluation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import simbench
from .deming import fit_bias_line, subset_slopes, write_slopes_csv
from .errors import ConfigError, NumericalError
from .estimator import SBConfig, fit_ls, fit_sb, popularity_ranking
from .metrics import (
    EvalReport,
    UserEval,
    precision_at_n,
    precision_at_tau,
    rank_candidates,
    relevant_items,
    user_rmse,
    write_reports,
)
from .neighborhood import (
    UserFeatures,
    UserIndex,
    build_neighborhood,
    compute_user_features,
    neighborhood_stats,
    table_fingerprint,
)
from .ratings import RatingTable, SplitDataset, split_per_user

log = logging.getLogger(__name__)

DEFAULT_SLOPE = 0.27
ESTIMATORS = ("SB", "LS", "popularity")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str | None = None
    format: str | None = None
    scale: str = "half"
    train_fraction: float = 0.75
    seed: int = 0
    rank: int = 25
    neighborhood_size: int = 100
    slope: float | None = None
    slope_subsets: int = 0
    subset_users: int = 100
    r: float = 1.0
    fallback: float = 3.5
    eval_users: int = 1000
    n_values: tuple = tuple(range(3, 31))
    tau_values: tuple = (3.0, 3.25, 3.5, 3.75, 4.0, 4.25, 4.5)
    weighted: bool = False
    threads: int = 1
    strict: bool = False

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.rank < 1 or self.neighborhood_size < 1 or self.eval_users < 1:
            raise ConfigError("rank, neighborhood_size and eval_users must be >= 1")
        if self.slope is not None and not self.slope > 0:
            raise ConfigError("slope must be > 0")
        if self.r < 0:
            raise ConfigError("r must be >= 0")
        if any(n < 1 for n in self.n_values):
            raise ConfigError("every N must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


_FIELD_TYPES = {
    "dataset": str, "format": str, "scale": str, "train_fraction": float, "seed": int,
    "rank": int, "neighborhood_size": int, "slope": float, "slope_subsets": int,
    "subset_users": int, "r": float, "fallback": float, "eval_users": int,
    "n_values": "ints", "tau_values": "floats", "weighted": "bool", "threads": int,
    "strict": "bool",
}


def parse_value(key: str, text: str):
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown configuration key {key!r}")
    text = text.strip()
    try:
        if kind == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in text.split(",") if v.strip())
        if kind == "bool":
            if text.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return text.lower() in ("1", "true", "yes", "on")
        return kind(text)
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for {key}") from None


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = parse_value(key.replace("-", "_"), value)
    return values


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Selection-bias line


def cmd_tls(table: RatingTable, subsets: int = 0, subset_users: int = 100, seed: int = 0,
            out_dir=None, provenance: dict | None = None) -> dict:
    line = fit_bias_line(table)
    result = {
        "slope": line.slope,
        "intercept": line.intercept,
        "objective": line.objective,
        "slope_log10": line.slope * np.log(10.0),
    }
    slopes = None
    if subsets:
        slopes = subset_slopes(table, subset_users, subsets, seed)
        result.update(subset_median=slopes.median(), subsets_fitted=len(slopes.slopes),
                      subsets_skipped=slopes.skipped)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        payload = dict(result, config=provenance or {})
        _write_json(os.path.join(out_dir, "tls.json"), payload)
        if slopes is not None:
            write_slopes_csv(os.path.join(out_dir, "subset_slopes.csv"), slopes.slopes,
                             [f"config: {json.dumps(provenance or {}, sort_keys=True)}"])
    return result


# ---------------------------------------------------------------------------
# Simulations


def cmd_simulate(experiment: str, sim: simbench.SimConfig, sb: SBConfig, values, replications: int,
                 out_dir=None, provenance: dict | None = None) -> dict:
    """Run one simulation experiment.

    ``values`` are sample sizes for ``recovery``, regularization weights for
    ``sweep-r`` and objective slopes for ``sweep-a``.
    """
    values = list(values)
    rows, summary = [], {}
    if experiment == "recovery":
        for n in values:
            res = simbench.run_recovery(dataclasses.replace(sim, n=int(n)), sb, replications)
            rows.extend(simbench.recovery_rows(experiment, int(n), res))
            summary[str(int(n))] = {
                "retained": res.retained,
                "rejected": res.rejected,
                "theta_star": res.theta_star.tolist(),
                **{name: {"mean": s.mean.tolist(), "std": s.std.tolist(), "rmse": s.rmse,
                          "error_std": s.error_std} for name, s in res.summaries.items()},
            }
    elif experiment in ("sweep-r", "sweep-a"):
        sweep = simbench.sweep_r if experiment == "sweep-r" else simbench.sweep_a
        result = sweep(sim, sb, [float(v) for v in values], replications)
        rows.extend(simbench.sweep_rows(experiment, result))
        summary = {repr(k): {"rmse": s.rmse, "error_std": s.error_std} for k, s in result.items()}
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")
    header = {
        "experiment": experiment,
        "generator": simbench.GENERATOR,
        "seed": sim.seed,
        "sim": dataclasses.asdict(sim),
        "sb": dataclasses.asdict(sb),
        "replications": replications,
        "values": values,
        **(provenance or {}),
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        stem = experiment.replace("-", "_")
        simbench.write_tidy_csv(os.path.join(out_dir, f"simulate_{stem}.csv"), rows,
                                [f"config: {json.dumps(header, sort_keys=True)}"])
        _write_json(os.path.join(out_dir, f"simulate_{stem}.json"), {"config": header, "summary": summary})
    return summary


# ---------------------------------------------------------------------------
# Neighborhood-based recommendation


@dataclass
class Prepared:
    split: SplitDataset
    features: UserFeatures
    train_index: UserIndex
    test_index: UserIndex
    slope: float
    slope_source: str
    extras: dict = field(default_factory=dict)


def _features_cached(split: SplitDataset, config: ExperimentConfig, cache_dir) -> UserFeatures:
    fingerprint = table_fingerprint(split.train)
    path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        key = hashlib.sha256(
            f"{fingerprint}|{config.seed}|{config.rank}|{config.train_fraction}".encode()
        ).hexdigest()[:20]
        path = os.path.join(cache_dir, f"features-{key}.npz")
        if os.path.exists(path):
            cached = UserFeatures.load(path)
            if cached.training_fingerprint == fingerprint and cached.rank == config.rank:
                log.info("loaded cached user features from %s", path)
                return cached
            log.info("cached features at %s do not match the current split; recomputing", path)
    feats = compute_user_features(split.train, config.rank, config.seed)
    if path is not None:
        feats.save(path)
    return feats


def prepare(table: RatingTable, config: ExperimentConfig, cache_dir=None) -> Prepared:
    split = split_per_user(table, config.train_fraction, config.seed)
    features = _features_cached(split, config, cache_dir)
    extras = {}
    if config.slope is not None:
        slope, source = config.slope, "configured"
    elif config.slope_subsets > 0:
        slopes = subset_slopes(split.train, config.subset_users, config.slope_subsets, config.seed)
        slope, source = slopes.median(), f"median of {len(slopes.slopes)} subset slopes"
        extras["subset_slopes_skipped"] = slopes.skipped
        if not slope > 0:
            raise NumericalError(f"estimated selection-bias slope {slope} is not positive")
    else:
        slope, source = DEFAULT_SLOPE, "default"
    return Prepared(split, features, UserIndex(split.train), UserIndex(split.test),
                    float(slope), source, extras)


def eligible_users(prep: Prepared) -> np.ndarray:
    """Users with features (non-empty train) and at least one test rating."""
    return np.intersect1d(prep.features.users, prep.test_index.users)


def sample_users(prep: Prepared, count: int, seed: int) -> list:
    users = eligible_users(prep)
    rng = np.random.default_rng([seed, 1])
    chosen = rng.choice(len(users), size=min(count, len(users)), replace=False)
    return [users[i].item() for i in np.sort(chosen)]


def _precisions(ranked, estimates, relevant, config):
    if not relevant:
        return {}, {}
    p_n = {n: precision_at_n(ranked, relevant, n) for n in config.n_values}
    if estimates is None:
        return p_n, {}
    candidates = {k: estimates[k] for k in ranked}
    p_tau = {}
    for tau in config.tau_values:
        value = precision_at_tau(candidates, relevant, tau)
        if value is not None:
            p_tau[tau] = value
    return p_n, p_tau


def evaluate_user(user, prep: Prepared, config: ExperimentConfig, r: float) -> dict:
    nb = build_neighborhood(prep.features, user, config.neighborhood_size)
    stats = neighborhood_stats(None, nb, config.weighted, index=prep.train_index)
    seen = {k.item() for k in prep.train_index.events_of(user).items}
    test = prep.test_index.events_of(user)
    relevant = relevant_items(test)

    solution = fit_sb(stats, SBConfig(slope=prep.slope, r=r))
    if config.strict and not solution.converged:
        raise NumericalError(
            f"SB fit for user {user} stopped at gradient norm {solution.final_gradient_norm:.3g}"
        )
    out = {}
    for name, estimates in (("SB", solution.theta), ("LS", fit_ls(stats))):
        ranked = rank_candidates(estimates, seen)
        p_n, p_tau = _precisions(ranked, estimates, relevant, config)
        out[name] = UserEval(user, user_rmse(estimates, test, config.fallback), p_n, p_tau, len(test))
    ranked = [k for k in popularity_ranking(stats) if k not in seen]
    p_n, _ = _precisions(ranked, None, relevant, config)
    out["popularity"] = UserEval(user, None, p_n, {}, len(test))
    out["_converged"] = solution.converged
    return out


def evaluate(prep: Prepared, config: ExperimentConfig, users, r: float | None = None) -> dict:
    r = config.r if r is None else r

    def one(user):
        return evaluate_user(user, prep, config, r)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(one, users))
    else:
        results = [one(u) for u in users]
    reports = {
        name: EvalReport(name, [res[name] for res in results], config.seed,
                         tuple(config.n_values), tuple(config.tau_values))
        for name in ESTIMATORS
    }
    unconverged = sum(not res["_converged"] for res in results)
    if unconverged:
        log.warning("%d of %d SB fits did not reach the gradient tolerance", unconverged, len(results))
    return reports


def cmd_recommend_eval(table: RatingTable, config: ExperimentConfig, out_dir=None) -> dict:
    cache = os.path.join(out_dir, "cache") if out_dir is not None else None
    prep = prepare(table, config, cache)
    users = sample_users(prep, config.eval_users, config.seed)
    log.info("evaluating %d users (slope %.4f, %s; r=%g)", len(users), prep.slope, prep.slope_source, config.r)
    reports = evaluate(prep, config, users)
    if out_dir is not None:
        provenance = dict(config.as_dict(), resolved_slope=prep.slope, slope_source=prep.slope_source,
                          evaluated_users=len(users), **prep.extras)
        write_reports(reports, os.path.join(out_dir, "recommend_eval.csv"),
                      os.path.join(out_dir, "recommend_eval.json"), provenance)
    return reports


def cmd_tune_r(table: RatingTable, config: ExperimentConfig, r_grid, validation_users: int = 100,
               out_dir=None) -> tuple[float, dict]:
    """Average SB RMSE on the first ``validation_users`` eligible users for each r.

    Returns the minimizing r (ties go to the smaller value) and the full curve.
    """
    grid = sorted(set(float(r) for r in r_grid))
    if not grid:
        raise ConfigError("empty r grid")
    cache = os.path.join(out_dir, "cache") if out_dir is not None else None
    prep = prepare(table, config, cache)
    users = [u.item() for u in eligible_users(prep)[:validation_users]]
    curve = {}
    for r in grid:
        reports = evaluate(prep, config, users, r=r)
        curve[r] = reports["SB"].aggregate["rmse"]
    best = min(grid, key=lambda r: (curve[r], r))
    if out_dir is not None:
        provenance = dict(config.as_dict(), resolved_slope=prep.slope, validation_users=len(users))
        with open(os.path.join(out_dir, "tune_r.csv"), "w") as fh:
            fh.write(f"# config: {json.dumps(provenance, sort_keys=True)}\n")
            fh.write("r,rmse\n")
            for r in grid:
                fh.write(f"{r!r},{curve[r]!r}\n")
        _write_json(os.path.join(out_dir, "tune_r.json"),
                    {"best_r": best, "curve": {repr(k): v for k, v in curve.items()}, "config": provenance})
    return best, curve
