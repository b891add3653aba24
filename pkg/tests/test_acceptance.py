"""Acceptance criteria, one check per criterion.

Each check returns ``(ok, detail)``; the pytest wrappers assert on it and the
results are printed as one PASS/FAIL line per criterion at the end of the
session (or directly when this file is run as a script).

The end-to-end MovieLens-100K ablation (second half of criterion 7) takes tens
of minutes and only runs when ``CGFEDREC_FULL=1``.
"""
import contextlib
import io
import json
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import (adjusted_rand_index, as_partition, assert_grad_close,  # noqa: E402
                     brute_force_partition, central_difference, contrastive_oracle)

import cgfedrec.federation as fed  # noqa: E402
from cgfedrec import experiments as ex  # noqa: E402
from cgfedrec.cli import main as cli_main  # noqa: E402
from cgfedrec.comms import ours_download_bytes, reduction_rate  # noqa: E402
from cgfedrec.evaluation import evaluate_all  # noqa: E402
from cgfedrec.federation import FederationConfig, run_federation  # noqa: E402
from cgfedrec.model import TrainBatch, bce_gradients, bce_loss  # noqa: E402
from cgfedrec.structure import (ContrastiveConfig, build_mask, contrastive_gradients,  # noqa: E402
                                contrastive_loss, kmeans)
from cgfedrec.synthetic import planted_dataset  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
ML100K = ROOT / "data" / "ml-100k" / "u.data"
RESULTS = []  # (number, title, ok, detail), read by conftest's terminal summary


def _record(num, title, ok, detail):
    RESULTS.append((num, title, ok, detail))
    return ok, detail


# -- checks ----------------------------------------------------------------------

def check_1_dataset_fidelity():
    t = time.perf_counter()
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        rc = cli_main(["stats", str(ML100K)])
    elapsed = time.perf_counter() - t
    s = json.loads(buf.getvalue())
    ok = (rc == 0 and (s["users"], s["items"], s["interactions"]) == (943, 1682, 100000)
          and abs(s["sparsity_pct"] - 93.70) <= 0.005 and elapsed < 5)
    return _record(1, "dataset fidelity", ok,
                   f"{s['users']} users, {s['items']} items, {s['interactions']} interactions, "
                   f"sparsity {s['sparsity_pct']:.2f}% in {elapsed:.2f}s")


def check_2_communication_exactness():
    t = time.perf_counter()
    ds, _ = planted_dataset(n_clients=10, n_items=40, n_groups=4, items_per_client=6,
                            n_eval_negatives=20, seed=0)
    ok = True
    base = dict(n_rounds=10, d=32, k=4, participation_rate=0.5, seed=3)
    lab = run_federation(ds, FederationConfig(broadcast_mode="labels_only", **base))
    emb = run_federation(ds, FederationConfig(broadcast_mode="embeddings_only", **base))
    for r in lab.reports:
        ok &= r.download_bytes == ours_download_bytes(len(r.participants), ds.n_items, 1)
    ratio = Fraction(lab.ledger.cumulative_down, emb.ledger.cumulative_down)
    ok &= ratio == Fraction(1, 32 * 4)
    red = reduction_rate(32, 4, 1)
    ok &= red == 1 - 1 / 128 and round(red, 4) == 0.9922
    elapsed = time.perf_counter() - t
    ok &= elapsed < 1.0
    return _record(2, "communication exactness", ok,
                   f"labels/embeddings = {ratio}, reduction {red:.4f}, toy run {elapsed:.2f}s")


def check_3_gradients():
    t = time.perf_counter()
    worst = 0.0
    ok = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m, d = int(rng.integers(3, 9)), int(rng.integers(1, 5))
        table = rng.uniform(-1, 1, (m, d))
        head = rng.uniform(-1, 1, d)
        n = int(rng.integers(1, 2 * m))
        batch = TrainBatch(rng.integers(0, m, n), rng.integers(0, 2, n).astype(float))
        gw, gE = bce_gradients(head, table, batch)
        num_w = central_difference(lambda: bce_loss(head, table, batch), head)
        num_E = central_difference(lambda: bce_loss(head, table, batch), table)
        labels = rng.integers(0, 2, m)
        cfg = ContrastiveConfig(tau=0.5, use_normalized=True)
        mask = build_mask(labels)
        gc = contrastive_gradients(table, mask, cfg).to_dense(m)
        num_c = central_difference(lambda: contrastive_loss(table, mask, cfg), table)
        for a, b in ((gw, num_w), (gE.to_dense(m), num_E), (gc, num_c)):
            try:
                assert_grad_close(a, b, rtol=1e-4)
            except AssertionError:
                ok = False
            big = np.maximum(np.abs(a), np.abs(b)) >= 1e-8
            if big.any():
                worst = max(worst, float(np.max(np.abs(a - b)[big] / np.abs(b)[big])))
    elapsed = time.perf_counter() - t
    ok &= elapsed < 10
    return _record(3, "gradient correctness", ok,
                   f"20 instances, max relative error {worst:.2e}, {elapsed:.2f}s")


def check_4_contrastive_oracle():
    E = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    oracle = contrastive_oracle(E, [0, 0, 1], 1.0, 1.0)
    ours = contrastive_loss(E, build_mask(np.array([0, 0, 1])), ContrastiveConfig(tau=1.0, tau_base=1.0))
    ok = abs(oracle - 0.208841) <= 1e-6 and abs(ours - 0.208841) <= 1e-6
    return _record(4, "contrastive oracle", ok, f"package {ours:.7f}, oracle {oracle:.7f}")


def check_5_kmeans():
    monotone = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(int(rng.integers(5, 60)), int(rng.integers(1, 6))))
        a = kmeans(X, int(rng.integers(1, 6)), seed=seed)
        h = np.asarray(a.inertia_history)
        monotone += bool(np.all(np.diff(h) <= 1e-12 * max(1.0, h[0])))
    pts = [(0, 0), (0.1, 0), (5, 5), (5.1, 5)]
    best, _ = brute_force_partition(pts, 2)
    got = as_partition(kmeans(np.array(pts, dtype=float), 2, seed=0).labels)
    ok = monotone == 50 and got == best
    return _record(5, "k-means properties", ok,
                   f"inertia monotone on {monotone}/50 instances; two-blob partition "
                   f"{'matches' if got == best else 'differs from'} brute force")


def _desk_config(seed, mode="labels_only", lam=0.1):
    return FederationConfig(n_rounds=30, d=16, k=4, seed=seed, broadcast_mode=mode,
                            contrastive=ContrastiveConfig(lam=lam))


def check_6_structure_recovery(seed=0):
    t = time.perf_counter()
    ds, groups = planted_dataset(n_clients=40, n_items=200, n_groups=4, seed=seed)
    res = run_federation(ds, _desk_config(seed))
    ari = adjusted_rand_index(list(groups), list(res.assignment.labels))
    elapsed = time.perf_counter() - t
    ok = ari >= 0.9 and elapsed < 60
    return _record(6, "structure recovery", ok, f"ARI {ari:.4f} after 30 rounds in {elapsed:.1f}s")


def check_7_directional_ablation():
    t = time.perf_counter()
    hr = {"labels_only": [], "embeddings_only": []}
    for seed in range(5):
        ds, _ = planted_dataset(seed=seed)
        for mode, lam in (("labels_only", 0.1), ("embeddings_only", 0.0)):
            res = run_federation(ds, _desk_config(seed, mode, lam))
            hr[mode].append(evaluate_all(res.states, ds, K=5)["hr"])
    ours, base = np.mean(hr["labels_only"]), np.mean(hr["embeddings_only"])
    elapsed = time.perf_counter() - t
    return _record(7, "directional ablation (desk scale)", bool(ours >= base),
                   f"HR@5 CGFedRec {ours:.4f} vs CGFedRec-E {base:.4f} over 5 seeds, {elapsed:.1f}s")


def check_7_full_ml100k(out_dir):
    t = time.perf_counter()
    spec = ex.ExperimentSpec.from_file(ROOT / "configs" / "ml100k.json").with_overrides(
        dataset=str(ML100K), output_dir=str(out_dir))
    rows = ex.run_ablation_suite(spec)
    elapsed = time.perf_counter() - t
    shaped = [r["variant"] for r in rows] == ["CGFedRec", "CGFedRec-E", "CGFedRec-EC", "CGFedRec-ERC"]
    ok = shaped and (Path(out_dir) / "ablation.csv").is_file() and elapsed <= 30 * 60
    table = "; ".join(f"{r['variant']} HR@5={r['hr@5']:.4f} NDCG@5={r['ndcg@5']:.4f}" for r in rows)
    return _record(7, "ML-100K end-to-end ablation", ok, f"{table}; {elapsed / 60:.1f} min")


def check_8_ldp_identity(tmp):
    spec = ex.ExperimentSpec(n_rounds=5, d=16, k=4, early_stop_patience=0, ldp_delta=0.0,
                             output_dir=str(Path(tmp) / "noise0"))
    ex.run_single(spec)
    real = fed.apply_ldp
    fed.apply_ldp = lambda upload, *a, **kw: upload
    try:
        ex.run_single(spec.with_overrides(output_dir=str(Path(tmp) / "skipped")))
    finally:
        fed.apply_ldp = real
    ex.run_single(spec.with_overrides(ldp_delta=0.1, output_dir=str(Path(tmp) / "noise1")))
    read = lambda name, f: (Path(tmp) / name / f).read_bytes()
    same = all(read("noise0", f) == read("skipped", f) for f in ("rounds.jsonl", "per_user.csv"))
    differs = read("noise0", "rounds.jsonl") != read("noise1", "rounds.jsonl")
    return _record(8, "LDP identity", same and differs,
                   f"delta=0 identical to skipped path: {same}; delta=0.1 differs: {differs}")


def check_9_determinism(tmp):
    spec = ex.ExperimentSpec(n_rounds=8, d=16, k=4, participation_rate=0.5, ldp_delta=0.1,
                             early_stop_patience=3, output_dir=str(Path(tmp) / "a"))
    ex.run_single(spec, workers=1)
    ex.run_single(spec.with_overrides(output_dir=str(Path(tmp) / "b")), workers=4)
    a = (Path(tmp) / "a" / "summary.json").read_bytes()
    b = (Path(tmp) / "b" / "summary.json").read_bytes()
    return _record(9, "determinism", a == b,
                   f"summary.json byte-identical across workers 1 and 4: {a == b}")


# -- pytest ----------------------------------------------------------------------

@pytest.mark.skipif(not ML100K.exists(), reason="MovieLens-100K not present")
def test_criterion_1_dataset_fidelity():
    ok, detail = check_1_dataset_fidelity()
    assert ok, detail


def test_criterion_2_communication_exactness():
    ok, detail = check_2_communication_exactness()
    assert ok, detail


def test_criterion_3_gradients():
    ok, detail = check_3_gradients()
    assert ok, detail


def test_criterion_4_contrastive_oracle():
    ok, detail = check_4_contrastive_oracle()
    assert ok, detail


def test_criterion_5_kmeans():
    ok, detail = check_5_kmeans()
    assert ok, detail


def test_criterion_6_structure_recovery():
    ok, detail = check_6_structure_recovery()
    assert ok, detail


def test_criterion_7_directional_ablation():
    ok, detail = check_7_directional_ablation()
    assert ok, detail


@pytest.mark.skipif(os.environ.get("CGFEDREC_FULL") != "1" or not ML100K.exists(),
                    reason="full ML-100K ablation runs only with CGFEDREC_FULL=1")
def test_criterion_7_full_ml100k(tmp_path):
    ok, detail = check_7_full_ml100k(tmp_path / "ml100k")
    assert ok, detail


def test_criterion_8_ldp_identity(tmp_path):
    ok, detail = check_8_ldp_identity(tmp_path)
    assert ok, detail


def test_criterion_9_determinism(tmp_path):
    ok, detail = check_9_determinism(tmp_path)
    assert ok, detail


def report_lines():
    return [f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
            for n, title, ok, detail in RESULTS]


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        checks = [check_1_dataset_fidelity, check_2_communication_exactness, check_3_gradients,
                  check_4_contrastive_oracle, check_5_kmeans, check_6_structure_recovery,
                  check_7_directional_ablation,
                  lambda: check_8_ldp_identity(Path(tmp) / "ldp"),
                  lambda: check_9_determinism(Path(tmp) / "det")]
        if os.environ.get("CGFEDREC_FULL") == "1":
            checks.insert(7, lambda: check_7_full_ml100k(Path(tmp) / "ml100k"))
        for check in checks:
            check()
            print(report_lines()[-1], flush=True)
    sys.exit(0 if all(r[2] for r in RESULTS) else 1)
