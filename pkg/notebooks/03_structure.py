"""
Server clustering and the cluster-guided contrastive term
=========================================================
"""
import numpy as np

from cgfedrec.structure import (ContrastiveConfig, aggregate, build_mask, contrastive_gradients,
                                contrastive_loss, decode_labels, encode_labels, kmeans)

rng = np.random.default_rng(1)
centres = rng.normal(size=(3, 4)) * 3
true = np.repeat(np.arange(3), 10)

# three clients upload noisy copies; each only trained half the items
tables = [centres[true] + rng.normal(scale=0.3, size=(30, 4)) for _ in range(3)]
coverage = [rng.random(30) < 0.5 for _ in range(3)]
g = aggregate(tables, coverage, previous_global=np.zeros((30, 4)))

assign = kmeans(g, 3, seed=0, n_init=5)
print("labels", assign.labels)
print("inertia per Lloyd iteration", np.round(assign.inertia_history, 2))

# what goes on the wire: one byte per item
payload = encode_labels(assign)
print(len(payload), "bytes;", "round trip ok:", np.array_equal(decode_labels(payload), assign.labels))

# a client pulls same-cluster items together
E = rng.normal(size=(30, 4))
mask = build_mask(assign)
cfg = ContrastiveConfig(tau=0.1)
for _ in range(100):
    E[...] -= 0.5 * contrastive_gradients(E, mask, cfg).to_dense(30)
print("contrastive loss after 100 steps", round(contrastive_loss(E, mask, cfg), 4))
