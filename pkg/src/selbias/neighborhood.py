"""User features from a truncated SVD, and cosine-similarity neighborhoods."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, svds

from .errors import ConfigError, DegenerateInputError, NumericalError
from .ratings import ItemStats, RatingTable, as_table, sufficient_stats

SVD_TOL = 1e-10
SVD_RESTARTS = 3
TIE_DECIMALS = 12


def table_fingerprint(table: RatingTable) -> str:
    order = np.lexsort((table.items, table.users))
    h = hashlib.sha256()
    for col in (table.users, table.items, table.ratings, table.weights):
        h.update(np.ascontiguousarray(np.asarray(col)[order]).tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class UserFeatures:
    """Rows of ``U * sqrt(S)`` for every user with a non-zero feature vector.

    ``item_factors`` holds ``V * sqrt(S)`` so that ``matrix @ item_factors.T``
    is the rank-``rank`` reconstruction of the rating matrix.
    """

    users: np.ndarray
    matrix: np.ndarray
    rank: int
    training_fingerprint: str
    singular_values: np.ndarray
    items: np.ndarray
    item_factors: np.ndarray

    @property
    def features(self) -> dict:
        return {u.item(): row for u, row in zip(self.users, self.matrix)}

    @cached_property
    def _unit(self) -> np.ndarray:
        return self.matrix / np.linalg.norm(self.matrix, axis=1, keepdims=True)

    def row_of(self, user_id) -> int:
        pos = int(np.searchsorted(self.users, user_id))
        if pos >= len(self.users) or self.users[pos] != user_id:
            raise KeyError(f"no features for user {user_id!r}")
        return pos

    def reconstruction(self) -> np.ndarray:
        return self.matrix @ self.item_factors.T

    def save(self, path) -> None:
        np.savez(
            path,
            users=self.users,
            matrix=self.matrix,
            rank=np.array(self.rank),
            user_count=np.array(len(self.users)),
            fingerprint=np.array(self.training_fingerprint),
            singular_values=self.singular_values,
            items=self.items,
            item_factors=self.item_factors,
        )

    @classmethod
    def load(cls, path) -> "UserFeatures":
        with np.load(path, allow_pickle=False) as data:
            return cls(
                users=data["users"],
                matrix=data["matrix"],
                rank=int(data["rank"]),
                training_fingerprint=str(data["fingerprint"]),
                singular_values=data["singular_values"],
                items=data["items"],
                item_factors=data["item_factors"],
            )


def rating_matrix(train) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    """Sparse user x item matrix of raw ratings; missing entries are zero."""
    table = as_table(train)
    users, rows = np.unique(table.users, return_inverse=True)
    items, cols = np.unique(table.items, return_inverse=True)
    mat = sp.csr_matrix((table.ratings, (rows, cols)), shape=(len(users), len(items)))
    return mat, users, items


def truncated_svd(mat, rank: int, seed: int):
    """Top ``rank`` singular triplets, singular values in decreasing order."""
    small = min(mat.shape)
    if rank < 1 or rank > small:
        raise ConfigError(f"rank {rank} outside [1, {small}] for a {mat.shape[0]}x{mat.shape[1]} matrix")
    if rank == small:
        # ARPACK needs rank < min(shape); a full decomposition is cheap at this size
        u, s, vt = np.linalg.svd(mat.toarray(), full_matrices=False)
        return u[:, :rank], s[:rank], vt[:rank]
    rng = np.random.default_rng(seed)
    maxiter = None
    for _ in range(SVD_RESTARTS + 1):
        v0 = rng.standard_normal(small)
        try:
            u, s, vt = svds(mat.astype(float), k=rank, v0=v0, tol=SVD_TOL, maxiter=maxiter)
        except ArpackNoConvergence:
            maxiter = 20 * max(mat.shape) if maxiter is None else 2 * maxiter
            continue
        order = np.argsort(-s, kind="stable")
        return u[:, order], s[order], vt[order]
    raise NumericalError(f"truncated SVD did not converge after {SVD_RESTARTS} restarts")


def compute_user_features(train, rank: int, seed: int) -> UserFeatures:
    table = as_table(train)
    if len(table) == 0:
        raise DegenerateInputError("no training ratings")
    mat, users, items = rating_matrix(table)
    u, s, vt = truncated_svd(mat, rank, seed)
    root = np.sqrt(s)
    feats = u * root
    keep = np.linalg.norm(feats, axis=1) > 0
    return UserFeatures(
        users=users[keep],
        matrix=feats[keep],
        rank=rank,
        training_fingerprint=table_fingerprint(table),
        singular_values=s,
        items=items,
        item_factors=vt.T * root,
    )


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class Neighborhood:
    target_user: object
    members: tuple  # ((user_id, similarity), ...) by decreasing similarity
    size: int

    @property
    def member_ids(self) -> list:
        return [m for m, _ in self.members]

    @property
    def similarities(self) -> np.ndarray:
        return np.array([c for _, c in self.members], dtype=float)


def build_neighborhood(features: UserFeatures, target, size: int) -> Neighborhood:
    """The ``size`` users most cosine-similar to ``target``, target excluded.

    Ties are broken by ascending user id. Similarities are compared after
    rounding to ``TIE_DECIMALS`` places so that vectors which are exactly
    parallel tie regardless of round-off in their norms.
    """
    if size < 1:
        raise ConfigError("neighborhood size must be >= 1")
    row = features.row_of(target)
    unit = features._unit
    sims = np.clip(unit @ unit[row], -1.0, 1.0)
    others = np.delete(np.arange(len(features.users)), row)
    key = -np.round(sims[others], TIE_DECIMALS)
    order = others[np.lexsort((features.users[others], key))][:size]
    members = tuple((features.users[i].item(), float(sims[i])) for i in order)
    return Neighborhood(target, members, size)


class UserIndex:
    """Row positions of each user's events in a table, for fast sub-selection."""

    def __init__(self, table: RatingTable):
        self.table = table
        self.users, inverse = np.unique(table.users, return_inverse=True)
        self._order = np.argsort(inverse, kind="stable")
        self._bounds = np.concatenate(([0], np.cumsum(np.bincount(inverse, minlength=len(self.users)))))

    def rows(self, user_id) -> np.ndarray:
        pos = int(np.searchsorted(self.users, user_id))
        if pos >= len(self.users) or self.users[pos] != user_id:
            return np.empty(0, dtype=np.int64)
        return self._order[self._bounds[pos]:self._bounds[pos + 1]]

    def events_of(self, user_id) -> RatingTable:
        return self.table.take(self.rows(user_id))


def neighborhood_stats(train, neighborhood: Neighborhood, weighted: bool = False,
                       index: UserIndex | None = None) -> ItemStats:
    """Sufficient statistics of the members' training ratings.

    In weighted mode each event carries its contributor's similarity; members
    with non-positive similarity are dropped.
    """
    if not neighborhood.members:
        raise DegenerateInputError("empty neighborhood")
    if index is None:
        index = UserIndex(as_table(train))
    rows, weights = [], []
    for user, sim in neighborhood.members:
        if weighted and sim <= 0:
            continue
        r = index.rows(user)
        rows.append(r)
        weights.append(np.full(len(r), sim if weighted else 1.0))
    if weighted and not rows:
        raise DegenerateInputError("all neighborhood similarities are non-positive")
    rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    if len(rows) == 0:
        raise DegenerateInputError("neighborhood members have no training ratings")
    events = index.table.take(rows).with_weights(np.concatenate(weights))
    return sufficient_stats(events)
