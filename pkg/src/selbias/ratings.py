"""Rating events, dataset ingestion, per-user splits and per-item sufficient statistics.

Events are held column-wise in a :class:`RatingTable`, which behaves as a
read-only sequence of :class:`RatingEvent` objects. Every function that takes
"events" accepts either a table or any iterable of ``RatingEvent``.
"""
from __future__ import annotations

import csv
import math
import os
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateInputError

DEFAULT_SIGMA2 = 1.0

# (low, high, step) of the admissible rating grid
SCALES = {
    "half": (0.5, 5.0, 0.5),  # MovieLens 10M / 20M
    "integer": (1.0, 5.0, 1.0),  # Netflix, MovieLens 1M
}

FORMATS = ("dat", "csv")
CSV_HEADER = ["userId", "movieId", "rating", "timestamp"]


@dataclass(frozen=True, slots=True)
class RatingEvent:
    user_id: object
    item_id: object
    rating: float
    weight: float = 1.0
    timestamp: int | None = None

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"weight must be > 0, got {self.weight}")


@dataclass(frozen=True, eq=False)
class RatingTable(Sequence):
    """Column-oriented, immutable collection of rating events."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    weights: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.users)
        cols = [self.items, self.ratings, self.weights]
        if self.timestamps is not None:
            cols.append(self.timestamps)
        if any(len(c) != n for c in cols):
            raise ValueError("all columns must have the same length")
        if n and not np.all(self.weights > 0):
            raise ValueError("all weights must be > 0")
        for c in (self.users, self.items, self.ratings, self.weights, self.timestamps):
            if c is not None:
                c.flags.writeable = False

    @classmethod
    def from_events(cls, events: Iterable[RatingEvent]) -> "RatingTable":
        if isinstance(events, RatingTable):
            return events
        events = list(events)
        if not events:
            return cls.empty()
        stamps = [e.timestamp for e in events]
        ts = None if any(s is None for s in stamps) else np.asarray(stamps, dtype=np.int64)
        return cls(
            users=np.asarray([e.user_id for e in events]),
            items=np.asarray([e.item_id for e in events]),
            ratings=np.asarray([e.rating for e in events], dtype=float),
            weights=np.asarray([e.weight for e in events], dtype=float),
            timestamps=ts,
        )

    @classmethod
    def empty(cls) -> "RatingTable":
        return cls(
            users=np.empty(0, dtype=np.int64),
            items=np.empty(0, dtype=np.int64),
            ratings=np.empty(0),
            weights=np.empty(0),
        )

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return self.take(np.arange(len(self))[idx])
        return RatingEvent(
            user_id=self.users[idx].item(),
            item_id=self.items[idx].item(),
            rating=float(self.ratings[idx]),
            weight=float(self.weights[idx]),
            timestamp=None if self.timestamps is None else int(self.timestamps[idx]),
        )

    def __iter__(self) -> Iterator[RatingEvent]:
        for i in range(len(self)):
            yield self[i]

    def take(self, index) -> "RatingTable":
        """Sub-table selected by an integer index array or a boolean mask."""
        index = np.asarray(index)
        return RatingTable(
            users=self.users[index],
            items=self.items[index],
            ratings=self.ratings[index],
            weights=self.weights[index],
            timestamps=None if self.timestamps is None else self.timestamps[index],
        )

    def with_weights(self, weights) -> "RatingTable":
        return RatingTable(self.users, self.items, self.ratings,
                           np.asarray(weights, dtype=float), self.timestamps)

    def for_users(self, user_ids) -> "RatingTable":
        return self.take(np.isin(self.users, np.asarray(list(user_ids))))

    def user_ids(self) -> np.ndarray:
        return np.unique(self.users)


def as_table(events) -> RatingTable:
    return RatingTable.from_events(events)


@dataclass(frozen=True, eq=False)
class ItemStats:
    """Per-item sufficient statistics of a (possibly weighted) rating population.

    ``items`` is sorted ascending and fixes the vector layout used by the
    estimators; ``counts[i]`` and ``sums[i]`` belong to ``items[i]``.
    """

    items: np.ndarray
    counts: np.ndarray
    sums: np.ndarray
    total_n: float
    sigma2: float = DEFAULT_SIGMA2
    sum_squares: float = 0.0  # sum of weight * rating**2, the L1 constant and merge input

    def __post_init__(self):
        if not (len(self.items) == len(self.counts) == len(self.sums)):
            raise ValueError("items, counts and sums must have identical lengths")
        if len(self.items) and not np.all(self.counts > 0):
            raise ValueError("every count must be strictly positive")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be > 0")
        total = float(np.sum(self.counts))
        if not math.isclose(total, self.total_n, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"total_n={self.total_n} differs from sum of counts {total}")
        if len(self.items) > 1 and not np.all(self.items[1:] > self.items[:-1]):
            raise ValueError("items must be sorted ascending and unique")

    @property
    def num_items(self) -> int:
        return len(self.items)

    @property
    def means(self) -> np.ndarray:
        return self.sums / self.counts

    def count_map(self) -> dict:
        return {k.item(): float(v) for k, v in zip(self.items, self.counts)}

    def sum_map(self) -> dict:
        return {k.item(): float(v) for k, v in zip(self.items, self.sums)}

    def index_of(self, item_id) -> int:
        pos = int(np.searchsorted(self.items, item_id))
        if pos >= len(self.items) or self.items[pos] != item_id:
            raise KeyError(item_id)
        return pos


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: RatingTable
    test: RatingTable
    seed: int
    train_fraction: float
    meta: dict = field(default_factory=dict)


def _weighted_variance(total_w: float, total_wy: float, total_wy2: float, n_events: int) -> float:
    if n_events < 2 or total_w <= 0:
        return DEFAULT_SIGMA2
    mean = total_wy / total_w
    var = total_wy2 / total_w - mean * mean
    # all ratings equal: no usable spread
    if not var > 1e-12:
        return DEFAULT_SIGMA2
    return float(var)


def sufficient_stats(events) -> ItemStats:
    """Weighted counts ``N_k`` and rating sums ``S_k`` per item.

    With unit weights this is the plain count / sum. ``sigma2`` is the weighted
    population variance of all ratings, or 1.0 when fewer than two events are
    available or all ratings coincide.
    """
    table = as_table(events)
    if len(table) == 0:
        raise DegenerateInputError("cannot compute statistics of an empty event list")
    items, inverse = np.unique(table.items, return_inverse=True)
    w = table.weights
    y = table.ratings
    counts = np.bincount(inverse, weights=w, minlength=len(items))
    sums = np.bincount(inverse, weights=w * y, minlength=len(items))
    total_wy2 = float(np.sum(w * y * y))
    total_n = float(np.sum(counts))
    return ItemStats(
        items=items,
        counts=counts,
        sums=sums,
        total_n=total_n,
        sigma2=_weighted_variance(total_n, float(np.sum(sums)), total_wy2, len(table)),
        sum_squares=total_wy2,
    )


def merge_stats(first: ItemStats, second: ItemStats, n_events: int = 2) -> ItemStats:
    """Pointwise sum of two statistics blocks, with ``sigma2`` recomputed.

    ``n_events`` is the number of underlying events; it only matters for the
    fewer-than-two fallback of the variance.
    """
    items = np.union1d(first.items, second.items)
    counts = np.zeros(len(items))
    sums = np.zeros(len(items))
    for s in (first, second):
        pos = np.searchsorted(items, s.items)
        counts[pos] += s.counts
        sums[pos] += s.sums
    total_n = first.total_n + second.total_n
    total_wy2 = first.sum_squares + second.sum_squares
    return ItemStats(
        items=items,
        counts=counts,
        sums=sums,
        total_n=total_n,
        sigma2=_weighted_variance(total_n, float(np.sum(sums)), total_wy2, n_events),
        sum_squares=total_wy2,
    )


def split_per_user(events, train_fraction: float, seed: int) -> SplitDataset:
    """Random per-user train/test partition.

    Each user with ``m`` events keeps ``round(train_fraction * m)`` of them,
    clamped to ``[1, m]``, in the training part. (user, item) pairs are
    assumed unique, as in the MovieLens and Netflix dumps.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    table = as_table(events)
    if len(table) == 0:
        return SplitDataset(table, table, seed, train_fraction)
    rng = np.random.default_rng(seed)
    keys = rng.random(len(table))
    _, user_idx, per_user = np.unique(table.users, return_inverse=True, return_counts=True)
    order = np.lexsort((keys, user_idx))
    starts = np.concatenate(([0], np.cumsum(per_user)[:-1]))
    rank = np.empty(len(table), dtype=np.int64)
    rank[order] = np.arange(len(table)) - starts[user_idx[order]]
    n_train = np.clip(np.floor(train_fraction * per_user + 0.5), 1, per_user).astype(np.int64)
    in_train = rank < n_train[user_idx]
    return SplitDataset(
        train=table.take(np.flatnonzero(in_train)),
        test=table.take(np.flatnonzero(~in_train)),
        seed=seed,
        train_fraction=train_fraction,
    )


def detect_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower().lstrip(".")
    if ext in FORMATS:
        return ext
    raise DataError(f"cannot infer dataset format from extension of {path!r}; pass format explicitly")


def _parse_id(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def _check_rating(value: float, scale: str, lineno: int, path) -> None:
    lo, hi, step = SCALES[scale]
    if not lo <= value <= hi:
        raise DataError(f"{path}:{lineno}: rating {value} outside [{lo}, {hi}]")
    if abs(value / step - round(value / step)) > 1e-9:
        raise DataError(f"{path}:{lineno}: rating {value} is not a multiple of {step}")


def _iter_rows(handle, fmt: str, path):
    if fmt == "dat":
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if line:
                yield lineno, line.split("::")
        return
    reader = csv.reader(handle)
    header = next(reader, None)
    if header is None:
        return
    if [h.strip() for h in header] != CSV_HEADER:
        raise DataError(f"{path}:1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
    for row in reader:
        if row:
            yield reader.line_num, row


def ingest(path, format: str | None = None, scale: str = "half") -> RatingTable:
    """Read a ratings file.

    ``format`` is ``"dat"`` (``user::item::rating::timestamp``) or ``"csv"``
    (header ``userId,movieId,rating,timestamp``); inferred from the file
    extension when omitted. ``scale`` selects the admissible rating grid.
    """
    fmt = format or detect_format(path)
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if scale not in SCALES:
        raise DataError(f"unknown rating scale {scale!r}; expected one of {tuple(SCALES)}")
    users, items, ratings, stamps = [], [], [], []
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            for lineno, fields in _iter_rows(handle, fmt, path):
                if len(fields) != 4:
                    raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
                try:
                    rating = float(fields[2])
                    stamp = int(fields[3])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: malformed line {fields!r}") from None
                _check_rating(rating, scale, lineno, path)
                users.append(_parse_id(fields[0].strip()))
                items.append(_parse_id(fields[1].strip()))
                ratings.append(rating)
                stamps.append(stamp)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not users:
        return RatingTable.empty()
    return RatingTable(
        users=np.asarray(users),
        items=np.asarray(items),
        ratings=np.asarray(ratings, dtype=float),
        weights=np.ones(len(users)),
        timestamps=np.asarray(stamps, dtype=np.int64),
    )
