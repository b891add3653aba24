"""Leave-one-out top-K metrics."""
from __future__ import annotations

import csv
import json
from typing import NamedTuple

import numpy as np

from .exceptions import ParameterError
from .model import logits, sigmoid


class RankedList(NamedTuple):
    candidate_items: np.ndarray
    scores: np.ndarray
    rank_of_target: int


def rank_from_scores(items, raw_scores, target) -> int:
    """1 + #candidates scoring strictly higher; equal scores rank lower index first."""
    items = np.asarray(items)
    hit = np.flatnonzero(items == target)
    if len(hit) == 0:
        raise ParameterError(f"target item {target} is not among the candidates")
    s = raw_scores[hit[0]]
    ahead = (raw_scores > s) | ((raw_scores == s) & (items < target))
    return 1 + int(np.count_nonzero(ahead))


def rank_target(head, table, candidates, target) -> RankedList:
    candidates = np.asarray(candidates, dtype=np.int64)
    # ranking on logits: same order as the sigmoid but without saturation ties
    z = logits(head, table, candidates)
    return RankedList(candidates, sigmoid(z), rank_from_scores(candidates, z, target))


def hr_at_k(rank, K) -> int:
    return int(rank <= K)


def ndcg_at_k(rank, K) -> float:
    return 1.0 / np.log2(rank + 1) if rank <= K else 0.0


def _candidates_full(ds, user):
    mask = np.ones(ds.n_items, dtype=bool)
    mask[ds.train_positives[user]] = False
    return np.flatnonzero(mask)


def evaluate_all(states, ds, K=5, users=None, targets=None, candidates=None, full_ranking=False):
    """Macro-averaged HR@K / NDCG@K.

    ``states`` maps a user index to something with ``head`` and ``table``
    attributes. ``users``/``targets``/``candidates`` override the test split
    (used for validation slices).
    """
    if users is None:
        users = range(ds.n_users)
        targets = ds.test_positive
        candidates = ds.eval_candidates
        if candidates is None and not full_ranking:
            raise ParameterError("dataset has no eval candidates; build them first")
        indexed = True
    else:
        indexed = False
    per_user = []
    for pos, u in enumerate(users):
        target = int(targets[u] if indexed else targets[pos])
        if full_ranking:
            cands = _candidates_full(ds, u)
        else:
            cands = candidates[u] if indexed else candidates[pos]
        st = states[u]
        rank = rank_target(st.head, st.table, cands, target).rank_of_target
        per_user.append((int(u), rank, hr_at_k(rank, K), ndcg_at_k(rank, K)))
    if not per_user:
        return {"hr": 0.0, "ndcg": 0.0, "per_user": []}
    hr = float(np.mean([p[2] for p in per_user]))
    ndcg = float(np.mean([p[3] for p in per_user]))
    return {"hr": hr, "ndcg": ndcg, "per_user": per_user}


def write_per_user_csv(result, path, K=5, user_ids=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "rank", f"hr@{K}", f"ndcg@{K}"])
        for u, rank, hr, ndcg in result["per_user"]:
            uid = u if user_ids is None else int(user_ids[u])
            w.writerow([uid, rank, hr, repr(float(ndcg))])


def summary_json(result, K=5):
    return json.dumps({f"hr@{K}": result["hr"], f"ndcg@{K}": result["ndcg"],
                       "users": len(result["per_user"])}, sort_keys=True)
