"""
What each broadcast mode costs on the wire
==========================================
"""
from cgfedrec.comms import baseline_download_bytes, ours_download_bytes, reduction_rate
from cgfedrec.federation import MODES, VARIANT_NAMES, FederationConfig, run_federation
from cgfedrec.synthetic import planted_dataset

# closed form at ML-100K scale: 943 clients, 1682 items, d=32
print("per round, embeddings:", baseline_download_bytes(943, 1682, 32), "B")
print("per round, labels:    ", ours_download_bytes(943, 1682), "B")
print("saving rate", round(reduction_rate(32), 4))

# measured by the ledger on a small run, half the clients per round
ds, _ = planted_dataset(seed=0)
for mode in MODES:
    res = run_federation(ds, FederationConfig(n_rounds=5, d=32, k=4, participation_rate=0.5,
                                              broadcast_mode=mode))
    led = res.ledger
    print(f"{VARIANT_NAMES[mode]:13s} up {led.cumulative_up:>9d} down {led.cumulative_down:>9d}")
