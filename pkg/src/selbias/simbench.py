"""Synthetic data from the selection-bias generative model and Monte Carlo harnesses.

Single population (the small-K experiments)::

    beta*  ~ Normal(theta* / a*, sigma_b)          one draw per data set
    X_t    ~ Multinomial(softmax(beta*))           t = 1..n
    Y_t    ~ Normal(theta*_{X_t}, sigma**2)

Only data sets in which every item was selected at least once are kept;
this is done by rejection, so the retained draws follow the model
conditioned on that event.

:func:`simulate_population` builds a multi-user rating matrix with the
same mechanism applied per taste group, used to exercise the full
recommendation pipeline.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, NumericalError
from .estimator import SBConfig, fit_sb
from .ratings import RatingTable, sufficient_stats

GENERATOR = "numpy.random.Generator(PCG64)"
DEFAULT_THETA = (3.0, 3.65, 4.3)


@dataclass(frozen=True)
class SimConfig:
    theta_star: tuple = DEFAULT_THETA
    a_star: float = 0.35
    sigma: float = 1.0
    sigma_b: float = 1.0
    n: int = 2000
    seed: int = 0

    def __post_init__(self):
        if len(self.theta_star) == 0:
            raise ConfigError("theta_star must be non-empty")
        if not (self.a_star > 0 and self.sigma > 0 and self.sigma_b > 0 and self.n > 0):
            raise ConfigError("a_star, sigma, sigma_b and n must be positive")


@dataclass(frozen=True, eq=False)
class SimDraw:
    events: RatingTable
    beta_star: np.ndarray
    lambda_star: np.ndarray
    all_items_observed: bool


def _draw(config: SimConfig, rng: np.random.Generator) -> SimDraw:
    theta = np.asarray(config.theta_star, dtype=float)
    beta = rng.normal(theta / config.a_star, config.sigma_b)
    lam = softmax(beta)
    items = rng.choice(len(theta), size=config.n, p=lam)
    ratings = rng.normal(theta[items], config.sigma)
    events = RatingTable(
        users=np.arange(config.n),
        items=items,
        ratings=ratings,
        weights=np.ones(config.n),
    )
    observed = bool(np.all(np.bincount(items, minlength=len(theta)) > 0))
    return SimDraw(events, beta, lam, observed)


def simulate(config: SimConfig) -> SimDraw:
    """One synthetic data set; deterministic given ``config.seed``."""
    return _draw(config, np.random.default_rng(config.seed))


def draw_replications(config: SimConfig, replications: int) -> tuple[list, int]:
    """First ``replications`` retained draws, and how many were rejected.

    Attempt ``j`` uses the generator seeded by ``(config.seed, j)``.
    """
    if replications < 1:
        raise ConfigError("replications must be >= 1")
    kept, rejected = [], 0
    for attempt in range(100 * replications):
        draw = _draw(config, np.random.default_rng([config.seed, attempt]))
        if draw.all_items_observed:
            kept.append(draw)
            if len(kept) == replications:
                return kept, rejected
        else:
            rejected += 1
    if not kept:
        raise NumericalError(
            f"no draw with every item observed in {100 * replications} attempts (n={config.n})"
        )
    return kept, rejected


@dataclass
class EstimatorSummary:
    name: str
    estimates: np.ndarray  # replications x K
    errors: np.ndarray  # per replication ||theta_hat - theta*||

    @property
    def mean(self) -> np.ndarray:
        return self.estimates.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.estimates.std(axis=0)

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.errors**2)))

    @property
    def error_std(self) -> float:
        return float(np.std(self.errors))


@dataclass
class RecoveryResult:
    theta_star: np.ndarray
    summaries: dict = field(default_factory=dict)
    retained: int = 0
    rejected: int = 0


def _sb_config_for(sim: SimConfig, sb_config: SBConfig) -> SBConfig:
    if sb_config.sigma2 is None:
        return replace(sb_config, sigma2=sim.sigma**2)
    return sb_config


def _estimates(draws, sb_config: SBConfig | None):
    out = []
    for draw in draws:
        stats = sufficient_stats(draw.events)
        if sb_config is None:
            out.append(stats.means)
        else:
            out.append(fit_sb(stats, sb_config).theta_vec)
    return np.array(out)


def _summary(name, estimates, theta_star):
    errors = np.linalg.norm(estimates - theta_star, axis=1)
    return EstimatorSummary(name, estimates, errors)


def run_recovery(config: SimConfig, sb_config: SBConfig, replications: int) -> RecoveryResult:
    """SB and LS estimates over ``replications`` retained data sets.

    When ``sb_config.sigma2`` is unset the model variance ``sigma**2`` is used.
    """
    draws, rejected = draw_replications(config, replications)
    theta_star = np.asarray(config.theta_star, dtype=float)
    sb_config = _sb_config_for(config, sb_config)
    result = RecoveryResult(theta_star, retained=len(draws), rejected=rejected)
    result.summaries["SB"] = _summary("SB", _estimates(draws, sb_config), theta_star)
    result.summaries["LS"] = _summary("LS", _estimates(draws, None), theta_star)
    return result


def _sweep(config, sb_config_base, field_name, values, replications):
    draws, _ = draw_replications(config, replications)
    theta_star = np.asarray(config.theta_star, dtype=float)
    base = _sb_config_for(config, sb_config_base)
    out = {}
    for value in values:
        cfg = replace(base, **{field_name: value})
        out[value] = _summary("SB", _estimates(draws, cfg), theta_star)
    return out


def sweep_r(config: SimConfig, sb_config_base: SBConfig, r_values, replications: int) -> dict:
    """RMSE summary of SB per regularization weight; all r share the same data sets."""
    return _sweep(config, sb_config_base, "r", list(r_values), replications)


def sweep_a(config: SimConfig, sb_config_base: SBConfig, a_values, replications: int) -> dict:
    """RMSE summary of SB per slope used in the objective; data always use ``a_star``."""
    return _sweep(config, sb_config_base, "slope", list(a_values), replications)


@dataclass(frozen=True)
class PopulationConfig:
    n_users: int = 600
    n_items: int = 400
    n_groups: int = 4
    a_star: float = 0.35
    sigma: float = 0.9
    sigma_b: float = 1.0
    quality_mean: float = 3.3
    quality_sd: float = 0.5
    taste_sd: float = 0.6
    min_ratings: int = 20
    mean_ratings: int = 40
    seed: int = 0


def simulate_population(config: PopulationConfig) -> RatingTable:
    """Multi-user data set with a selection bias inside each taste group.

    Group ``g`` has true ratings ``theta_g = quality + taste_g``; its users
    pick items without replacement with probabilities
    ``softmax(Normal(theta_g / a*, sigma_b))`` and report
    ``Normal(theta_g, sigma**2)`` rounded to the half-star grid 0.5..5.
    """
    rng = np.random.default_rng(config.seed)
    quality = rng.normal(config.quality_mean, config.quality_sd, config.n_items)
    users, items, ratings = [], [], []
    group_of = rng.integers(config.n_groups, size=config.n_users)
    thetas, probs = [], []
    for _ in range(config.n_groups):
        theta = quality + rng.normal(0.0, config.taste_sd, config.n_items)
        beta = rng.normal(theta / config.a_star, config.sigma_b)
        thetas.append(theta)
        probs.append(softmax(beta))
    extra = max(config.mean_ratings - config.min_ratings, 0)
    for u in range(config.n_users):
        g = group_of[u]
        m = config.min_ratings + (rng.geometric(1.0 / (extra + 1)) - 1 if extra else 0)
        m = min(m, config.n_items, int(np.count_nonzero(probs[g])))
        chosen = rng.choice(config.n_items, size=m, replace=False, p=probs[g])
        y = rng.normal(thetas[g][chosen], config.sigma)
        y = np.clip(np.round(y * 2) / 2, 0.5, 5.0)
        users.append(np.full(m, u))
        items.append(chosen)
        ratings.append(y)
    users = np.concatenate(users)
    return RatingTable(
        users=users,
        items=np.concatenate(items),
        ratings=np.concatenate(ratings),
        weights=np.ones(len(users)),
        timestamps=np.zeros(len(users), dtype=np.int64),
    )


def write_tidy_csv(path, rows, header_lines=()) -> None:
    """Rows of ``(experiment, parameter, replication, estimator, rmse)``."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["experiment", "parameter", "replication", "estimator", "rmse"])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], row[3], repr(float(row[4]))])


def recovery_rows(experiment: str, parameter, result: RecoveryResult):
    for name, summary in result.summaries.items():
        for j, err in enumerate(summary.errors):
            yield experiment, parameter, j, name, err


def sweep_rows(experiment: str, sweep: dict):
    for value, summary in sweep.items():
        for j, err in enumerate(summary.errors):
            yield experiment, value, j, summary.name, err
