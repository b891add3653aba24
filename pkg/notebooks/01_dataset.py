"""
Loading MovieLens-100K and the leave-one-out split
==================================================
"""
from pathlib import Path

import numpy as np

from cgfedrec.dataset import compute_stats, ingest, load, sample_train_negatives

DATA = Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"

# raw log: user, item, rating, timestamp; ids get re-indexed to 0..n-1
records = ingest(DATA)
print(compute_stats(records).to_json())

# filter (> 5 interactions), hold out each user's latest item, draw 99 eval negatives
ds = load(DATA, seed=0)
print("users", ds.n_users, "items", ds.n_items)
print("train positives", sum(len(t) for t in ds.train_positives))

u = 0
print("user 0 test item", ds.test_positive[u], "first candidates", ds.eval_candidates[u][:5])

# 1:4 negatives per positive, with replacement, never from the user's own items
negs = sample_train_negatives(ds, u, 4, seed=0)
print(len(ds.train_positives[u]), "positives ->", len(negs), "negatives")
assert not np.isin(negs, ds.train_positives[u]).any()
