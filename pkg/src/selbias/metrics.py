"""Per-user RMSE, precision at N and precision at a rating threshold."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError
from .ratings import as_table

FALLBACK_RATING = 3.5
RELEVANCE_THRESHOLD = 4.0


def user_rmse(estimates: dict, test_events, fallback: float = FALLBACK_RATING) -> float:
    """RMSE over a user's test events; unestimated items are predicted as ``fallback``."""
    table = as_table(test_events)
    if len(table) == 0:
        raise DegenerateInputError("empty test set")
    pred = np.array([estimates.get(k.item(), fallback) for k in table.items], dtype=float)
    return float(np.sqrt(np.mean((table.ratings - pred) ** 2)))


def relevant_items(test_events, threshold: float = RELEVANCE_THRESHOLD) -> set:
    table = as_table(test_events)
    return {k.item() for k in table.items[table.ratings >= threshold]}


def rank_candidates(estimates: dict, exclude=()) -> list:
    """Items by decreasing estimate, ties by ascending id, ``exclude`` removed."""
    exclude = set(exclude)
    keys = [k for k in estimates if k not in exclude]
    return sorted(keys, key=lambda k: (-estimates[k], k))


def precision_at_n(ranked_items, relevant, n: int) -> float:
    """Hits among the first ``n`` ranked items, divided by ``n`` even if fewer are ranked."""
    if n < 1:
        raise ValueError("n must be >= 1")
    relevant = set(relevant)
    return sum(1 for k in list(ranked_items)[:n] if k in relevant) / n


def precision_at_tau(estimates: dict, relevant, tau: float):
    """Share of relevant items among those estimated at ``>= tau``; ``None`` if there are none."""
    selected = [k for k, v in estimates.items() if v >= tau]
    if not selected:
        return None
    relevant = set(relevant)
    return sum(1 for k in selected if k in relevant) / len(selected)


@dataclass
class UserEval:
    user_id: object
    rmse: float | None
    p_at_n: dict = field(default_factory=dict)
    p_at_tau: dict = field(default_factory=dict)
    test_size: int = 0


def _mean(values):
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


@dataclass
class EvalReport:
    estimator_name: str
    per_user: list
    seed: int = 0
    n_values: tuple = ()
    tau_values: tuple = ()

    @property
    def num_users(self) -> int:
        return len(self.per_user)

    @property
    def aggregate(self) -> dict:
        users = sorted(self.per_user, key=lambda e: e.user_id)
        return {
            "rmse": _mean(e.rmse for e in users),
            "p_at_n": {n: _mean(e.p_at_n.get(n) for e in users) for n in self.n_values},
            "p_at_tau": {t: _mean(e.p_at_tau.get(t) for e in users) for t in self.tau_values},
            "users_with_rmse": sum(e.rmse is not None for e in users),
            "users_with_precision": sum(bool(e.p_at_n) for e in users),
            "users_with_p_at_tau": {t: sum(t in e.p_at_tau for e in users) for t in self.tau_values},
        }

    def rows(self):
        for e in sorted(self.per_user, key=lambda e: e.user_id):
            if e.rmse is not None:
                yield e.user_id, self.estimator_name, "rmse", e.rmse
            for n in self.n_values:
                if n in e.p_at_n:
                    yield e.user_id, self.estimator_name, f"p@{n}", e.p_at_n[n]
            for t in self.tau_values:
                if t in e.p_at_tau:
                    yield e.user_id, self.estimator_name, f"p@tau{t:g}", e.p_at_tau[t]


def write_reports(reports: dict, csv_path, json_path, config: dict | None = None) -> None:
    """Per-user tidy CSV for all estimators plus a JSON block of per-estimator averages."""
    with open(csv_path, "w", newline="") as fh:
        if config is not None:
            fh.write(f"# config: {json.dumps(config, sort_keys=True)}\n")
        writer = csv.writer(fh)
        writer.writerow(["user_id", "estimator", "metric", "value"])
        for report in reports.values():
            for row in report.rows():
                writer.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    summary = {}
    for name, report in reports.items():
        agg = report.aggregate
        summary[name] = {
            "RMSE": agg["rmse"],
            **{f"P@N{n}": v for n, v in agg["p_at_n"].items()},
            **{f"P@tau{t:g}": v for t, v in agg["p_at_tau"].items()},
            "num_users": report.num_users,
            "users_with_rmse": agg["users_with_rmse"],
            "users_with_precision": agg["users_with_precision"],
        }
    payload = {"estimators": summary}
    if config is not None:
        payload["config"] = config
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
