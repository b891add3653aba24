"""Interaction-log ingestion, filtering, leave-one-out splitting and sampling.

Records are held column-wise in :class:`Interactions`; user and item ids are
always dense (``0..n-1`` / ``0..m-1``) and the original ids are kept in
``user_ids`` / ``item_ids`` for reporting.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import _rng
from .exceptions import EmptyDatasetError, ParseError, SamplingError, SplitError

DELIMITERS = {"tab_separated": "\t", "comma_separated": ","}


class RawInteraction(NamedTuple):
    user_id: int
    item_id: int
    rating: float
    timestamp: int = 0


@dataclass
class Interactions:
    """Column store of interaction records with dense ids."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray  # dense index -> original id
    item_ids: np.ndarray

    def __len__(self):
        return len(self.users)

    def __getitem__(self, idx) -> RawInteraction:
        return RawInteraction(int(self.users[idx]), int(self.items[idx]),
                              float(self.ratings[idx]), int(self.timestamps[idx]))

    def __iter__(self) -> Iterator[RawInteraction]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def labels(self):
        """Implicit-feedback labels: 1 where rating > 0."""
        return (self.ratings > 0).astype(np.int8)

    @classmethod
    def from_raw(cls, users, items, ratings, timestamps=None, user_ids=None, item_ids=None):
        """Build from raw (possibly sparse) ids, re-indexing both axes densely.

        ``user_ids``/``item_ids`` map the incoming ids to original ids when the
        input was already re-indexed once.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=np.float64)
        if timestamps is None:
            timestamps = np.zeros(len(users), dtype=np.int64)
        uniq_u, dense_u = np.unique(users, return_inverse=True)
        uniq_i, dense_i = np.unique(items, return_inverse=True)
        orig_u = uniq_u if user_ids is None else np.asarray(user_ids)[uniq_u]
        orig_i = uniq_i if item_ids is None else np.asarray(item_ids)[uniq_i]
        return cls(dense_u.astype(np.int64), dense_i.astype(np.int64), ratings,
                   np.asarray(timestamps, dtype=np.int64), orig_u, orig_i)


@dataclass
class InteractionDataset:
    n_users: int
    n_items: int
    train_positives: list
    test_positive: np.ndarray
    eval_candidates: list | None = None
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None
    held_out: np.ndarray | None = None  # per-user validation item, -1 if none

    @property
    def n_interactions(self):
        return int(sum(len(t) for t in self.train_positives)) + self.n_users

    def interacted_mask(self, user) -> np.ndarray:
        """Boolean length-m mask of every item the user interacted with."""
        mask = np.zeros(self.n_items, dtype=bool)
        mask[self.train_positives[user]] = True
        mask[self.test_positive[user]] = True
        if self.held_out is not None and self.held_out[user] >= 0:
            mask[self.held_out[user]] = True
        return mask


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_interactions: int
    sparsity: float

    def to_dict(self):
        return {"users": self.n_users, "items": self.n_items,
                "interactions": self.n_interactions,
                "sparsity_pct": round(100.0 * self.sparsity, 2)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _detect_format(line):
    return "tab_separated" if "\t" in line else "comma_separated"


def ingest(path, format=None) -> Interactions:
    """Read a MovieLens-style log ``user, item, rating[, timestamp]``.

    ``format`` is ``"tab_separated"`` or ``"comma_separated"``; ``None`` sniffs
    the first non-empty line.
    """
    path = Path(path)
    users, items, ratings, stamps = [], [], [], []
    delim = DELIMITERS[format] if format is not None else None
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if delim is None:
                delim = DELIMITERS[_detect_format(line)]
            fields = line.split(delim)
            if len(fields) < 3:
                raise ParseError(line_no, f"expected at least 3 fields, got {len(fields)}")
            try:
                u, i, r = int(fields[0]), int(fields[1]), float(fields[2])
                ts = int(fields[3]) if len(fields) > 3 and fields[3] != "" else 0
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
            if r < 0:
                raise ParseError(line_no, f"negative rating {r}")
            users.append(u)
            items.append(i)
            ratings.append(r)
            stamps.append(ts)
    if not users:
        raise EmptyDatasetError(f"{path}: no interaction records")
    return Interactions.from_raw(users, items, ratings, stamps)


def filter_min_interactions(records: Interactions, min_count: int) -> Interactions:
    """Keep users with strictly more than ``min_count`` records, then re-densify."""
    if min_count < 0:
        raise ValueError("min_count must be >= 0")
    counts = np.bincount(records.users, minlength=records.n_users)
    keep = counts[records.users] > min_count
    return Interactions.from_raw(records.users[keep], records.items[keep],
                                 records.ratings[keep], records.timestamps[keep],
                                 records.user_ids, records.item_ids)


def split_leave_one_out(records: Interactions, seed: int) -> InteractionDataset:
    """Hold out each user's latest positive interaction.

    Equal timestamps (including absent ones, which read as 0) are broken by a
    seeded uniform draw. Repeated (user, item) pairs collapse to one positive.
    """
    pos = records.labels == 1
    users, items, stamps = records.users[pos], records.items[pos], records.timestamps[pos]
    tiebreak = _rng.derive_rng(seed, _rng.SPLIT).random(len(users))
    order = np.lexsort((tiebreak, stamps, items, users))
    users, items, stamps, tiebreak = users[order], items[order], stamps[order], tiebreak[order]
    # dedupe (user, item): last in each run has the latest timestamp
    last = np.ones(len(users), dtype=bool)
    last[:-1] = (users[1:] != users[:-1]) | (items[1:] != items[:-1])
    users, items, stamps, tiebreak = users[last], items[last], stamps[last], tiebreak[last]

    order = np.lexsort((tiebreak, stamps, users))
    users, items = users[order], items[order]
    bounds = np.searchsorted(users, np.arange(records.n_users + 1))
    train, test = [], np.empty(records.n_users, dtype=np.int64)
    for u in range(records.n_users):
        lo, hi = bounds[u], bounds[u + 1]
        if hi - lo < 2:
            raise SplitError(u, f"needs >= 2 positive interactions, has {hi - lo}")
        test[u] = items[hi - 1]
        train.append(np.sort(items[lo:hi - 1]))
    return InteractionDataset(records.n_users, records.n_items, train, test,
                              user_ids=records.user_ids, item_ids=records.item_ids)


def _non_interacted(ds, user):
    return np.flatnonzero(~ds.interacted_mask(user))


def sample_train_negatives(ds: InteractionDataset, user: int, ratio: int, seed: int) -> np.ndarray:
    """Draw ``ratio * |train_positives[user]|`` negatives with replacement."""
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    pool = _non_interacted(ds, user)
    if len(pool) == 0:
        raise SamplingError(user, "has interacted with every item")
    rng = _rng.derive_rng(seed, _rng.NEGATIVES, user)
    return pool[rng.integers(0, len(pool), size=ratio * len(ds.train_positives[user]))]


def build_eval_candidates(ds: InteractionDataset, n_negatives: int, seed: int) -> list:
    """Per user: the held-out positive followed by ``n_negatives`` distinct negatives."""
    out = []
    for u in range(ds.n_users):
        pool = _non_interacted(ds, u)
        if len(pool) < n_negatives:
            raise SamplingError(u, f"only {len(pool)} non-interacted items for "
                                f"{n_negatives} negatives", shortfall=n_negatives - len(pool))
        rng = _rng.derive_rng(seed, _rng.EVAL_NEGATIVES, u)
        negs = rng.choice(pool, size=n_negatives, replace=False)
        out.append(np.concatenate(([ds.test_positive[u]], negs)).astype(np.int64))
    return out


def with_eval_candidates(ds: InteractionDataset, n_negatives: int = 99, seed: int = 0) -> InteractionDataset:
    return replace(ds, eval_candidates=build_eval_candidates(ds, n_negatives, seed))


@dataclass
class ValidationSlice:
    users: np.ndarray
    positive: np.ndarray
    candidates: list


def carve_validation(ds: InteractionDataset, n_negatives: int, seed: int):
    """Move one random train positive per user into a validation slice.

    Users with a single train positive keep it and are left out of the slice.
    Returns ``(reduced_dataset, ValidationSlice)``; the reduced dataset keeps the
    original test items and eval candidates.
    """
    rng = _rng.derive_rng(seed, _rng.VALIDATION)
    train, users, positives, cands = [], [], [], []
    for u in range(ds.n_users):
        items = ds.train_positives[u]
        if len(items) < 2:
            train.append(items)
            continue
        j = int(rng.integers(len(items)))
        users.append(u)
        positives.append(items[j])
        train.append(np.delete(items, j))
        pool = _non_interacted(ds, u)
        k = min(n_negatives, len(pool))
        negs = _rng.derive_rng(seed, _rng.VALIDATION, u).choice(pool, size=k, replace=False)
        cands.append(np.concatenate(([items[j]], negs)).astype(np.int64))
    held = np.full(ds.n_users, -1, dtype=np.int64)
    held[users] = positives
    # the held-out item stays "interacted", so it is never drawn as a negative
    reduced = replace(ds, train_positives=train, held_out=held)
    return reduced, ValidationSlice(np.asarray(users, dtype=np.int64),
                                    np.asarray(positives, dtype=np.int64), cands)


def compute_stats(data) -> DatasetStats:
    """Counts and sparsity for an :class:`Interactions` or :class:`InteractionDataset`."""
    if isinstance(data, InteractionDataset):
        n, m, nnz = data.n_users, data.n_items, data.n_interactions
    else:
        n, m, nnz = data.n_users, data.n_items, len(data)
    if n == 0 or m == 0:
        raise EmptyDatasetError("cannot compute statistics of an empty dataset")
    return DatasetStats(n, m, nnz, 1.0 - nnz / (n * m))


def load(path, format=None, min_count=5, seed=0, n_eval_negatives=99) -> InteractionDataset:
    """ingest -> filter -> leave-one-out split -> eval candidates."""
    records = filter_min_interactions(ingest(path, format), min_count)
    if len(records) == 0:
        raise EmptyDatasetError(f"{path}: no users with more than {min_count} interactions")
    return with_eval_candidates(split_leave_one_out(records, seed), n_eval_negatives, seed)
