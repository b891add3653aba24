"""Planted-group interaction data for desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .dataset import Interactions, split_leave_one_out, with_eval_candidates


def planted_groups(n_clients=40, n_items=200, n_groups=4, items_per_client=45, seed=0):
    """Clients interact only with items of one planted group.

    Client ``c`` belongs to group ``c % n_groups`` and picks ``items_per_client``
    distinct items from it, with random timestamps. Returns
    ``(Interactions, group_of_item)``.
    """
    if n_items % n_groups:
        raise ValueError("n_items must be a multiple of n_groups")
    size = n_items // n_groups
    if not 2 <= items_per_client <= size:
        raise ValueError("items_per_client must be in [2, items per group]")
    rng = np.random.default_rng(seed)
    group_of_item = np.repeat(np.arange(n_groups), size)
    users, items = [], []
    for c in range(n_clients):
        g = c % n_groups
        chosen = rng.choice(size, size=items_per_client, replace=False) + g * size
        users.extend([c] * items_per_client)
        items.extend(chosen.tolist())
    # every item id appears as (user, item) for at least one client only if covered;
    # pin the item axis so ids stay 0..n_items-1 regardless of coverage
    recs = Interactions(np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64),
                        np.ones(len(users)), rng.integers(1, 10**6, size=len(users)),
                        np.arange(n_clients), np.arange(n_items))
    return recs, group_of_item


def planted_dataset(n_clients=40, n_items=200, n_groups=4, items_per_client=45,
                    n_eval_negatives=99, seed=0):
    """Split + eval candidates on top of :func:`planted_groups`."""
    recs, groups = planted_groups(n_clients, n_items, n_groups, items_per_client, seed)
    ds = with_eval_candidates(split_leave_one_out(recs, seed), n_eval_negatives, seed)
    return ds, groups
