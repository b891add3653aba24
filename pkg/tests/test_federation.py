import json
from dataclasses import replace

import numpy as np
import pytest

import cgfedrec.federation as fed
from cgfedrec.comms import ours_download_bytes
from cgfedrec.dataset import Interactions, split_leave_one_out
from cgfedrec.exceptions import RoundError
from cgfedrec.federation import (EMBEDDINGS_AND_LABELS, EMBEDDINGS_AND_RANDOM_LABELS,
                                 EMBEDDINGS_ONLY, LABELS_ONLY, MODES, FederationConfig,
                                 Simulator, apply_ldp, client_round, init_client,
                                 run_federation, select_participants)
from cgfedrec.model import LearningRates, predict
from cgfedrec.structure import ContrastiveConfig, random_labels
from cgfedrec.synthetic import planted_dataset


@pytest.fixture(scope="module")
def small():
    ds, _ = planted_dataset(n_clients=8, n_items=40, n_groups=4, items_per_client=6,
                            n_eval_negatives=20, seed=1)
    return ds


def cfg_for(**kw):
    base = dict(n_rounds=3, d=4, k=3, batch_size=16, seed=5,
                rates=LearningRates(0.1, 0.1), contrastive=ContrastiveConfig(lam=0.2))
    base.update(kw)
    return FederationConfig(**base)


# -- participant sampling --------------------------------------------------------

def test_full_participation():
    for r in range(1, 4):
        assert list(select_participants(7, 1.0, r, 0)) == list(range(7))


def test_partial_participation_count():
    sel = select_participants(10, 0.3, 1, 0)
    assert len(sel) == 3 == len(set(sel))
    assert len(select_participants(10, 0.01, 1, 0)) == 1


def test_participation_determinism():
    assert np.array_equal(select_participants(50, 0.2, 4, 9), select_participants(50, 0.2, 4, 9))
    rounds = {tuple(select_participants(50, 0.2, r, 9)) for r in range(1, 6)}
    assert len(rounds) > 1


def test_bad_gamma():
    with pytest.raises(Exception):
        select_participants(10, 0.0, 1, 0)
    with pytest.raises(Exception):
        FederationConfig(participation_rate=1.5)


# -- client round ----------------------------------------------------------------

def test_zero_lambda_equals_no_labels(small):
    cfg = cfg_for(contrastive=ContrastiveConfig(lam=0.0), broadcast_mode=EMBEDDINGS_AND_LABELS)
    state = init_client(2, small, cfg)
    g = np.random.default_rng(0).normal(size=(small.n_items, cfg.d))
    labels = random_labels(small.n_items, 3, 0)
    a = client_round(state, small, labels, g, cfg, 1)
    b = client_round(state, small, None, g, replace(cfg, broadcast_mode=EMBEDDINGS_ONLY), 1)
    assert np.array_equal(a[0].table, b[0].table) and np.array_equal(a[0].head, b[0].head)


def test_zero_epochs_is_identity(small):
    cfg = cfg_for(local_epochs=0)
    state = init_client(0, small, cfg)
    new, upload, _ = client_round(state, small, random_labels(small.n_items, 3, 0), None, cfg, 1)
    assert np.array_equal(new.table, state.table) and np.array_equal(new.head, state.head)
    assert np.array_equal(upload.table, state.table)
    assert not upload.coverage.any()
    g = np.ones((small.n_items, cfg.d))
    _, upload, _ = client_round(state, small, None, g, cfg, 1)
    assert np.array_equal(upload.table, g)


def test_client_round_does_not_mutate_input(small):
    cfg = cfg_for()
    state = init_client(1, small, cfg)
    t0, h0 = state.table.copy(), state.head.copy()
    client_round(state, small, random_labels(small.n_items, 3, 0), None, cfg, 1)
    assert np.array_equal(state.table, t0) and np.array_equal(state.head, h0)


def test_coverage_flags_match_batches(small):
    cfg = cfg_for()
    state = init_client(3, small, cfg)
    _, upload, _ = client_round(state, small, None, None, cfg, 2)
    assert upload.coverage[state.train_items].all()
    assert not upload.coverage[small.test_positive[3]]


def test_single_positive_converges():
    # one user, positive item 0 (train) and 1 (test), two never-seen items
    recs = Interactions(np.array([0, 0]), np.array([0, 1]), np.ones(2), np.array([1, 2]),
                        np.arange(1), np.arange(4))
    ds = split_leave_one_out(recs, 0)
    cfg = FederationConfig(n_rounds=1, d=4, k=2, neg_ratio=1,
                           rates=LearningRates(0.05, 0.05), contrastive=ContrastiveConfig(lam=0.0))
    state = init_client(0, ds, cfg)
    prev = predict(state.head, state.table, 0)
    for r in range(1, 400):
        state, _, _ = client_round(state, ds, None, None, cfg, r)
        cur = predict(state.head, state.table, 0)
        assert cur > prev
        prev = cur
        if cur > 0.9:
            break
    assert prev > 0.9


# -- LDP -------------------------------------------------------------------------

def test_ldp_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert apply_ldp(x, 0.0, 1).tobytes() == x.tobytes()


def test_ldp_mean_zero():
    x = np.zeros((1000, 1000))
    noise = apply_ldp(x, 0.1, seed=3) - x
    sigma_mean = 0.1 * np.sqrt(2) / 1e3
    assert abs(noise.mean()) < 3 * sigma_mean
    assert noise.std() == pytest.approx(0.1 * np.sqrt(2), rel=0.01)


def test_ldp_seeded():
    x = np.zeros((4, 4))
    assert np.array_equal(apply_ldp(x, 0.2, 1), apply_ldp(x, 0.2, 1))
    assert not np.array_equal(apply_ldp(x, 0.2, 1), apply_ldp(x, 0.2, 2))
    g = apply_ldp(x, 0.2, 1, mechanism="gaussian")
    assert not np.array_equal(g, apply_ldp(x, 0.2, 1))


# -- full runs -------------------------------------------------------------------

def test_one_round_two_clients():
    ds, _ = planted_dataset(n_clients=2, n_items=8, n_groups=2, items_per_client=3,
                            n_eval_negatives=3, seed=0)
    res = run_federation(ds, cfg_for(n_rounds=1, k=2))
    assert len(res.ledger.per_round) == 1
    r = res.ledger.per_round[0]
    assert r.upload_bytes == 2 * 8 * 4 * 4
    assert r.download_bytes == 2 * 8 * 1
    assert res.reports[0].participants == [0, 1]


def test_mode_semantics(small):
    erc = run_federation(small, cfg_for(n_rounds=4, broadcast_mode=EMBEDDINGS_AND_RANDOM_LABELS))
    hashes = [r.cluster_labels_hash for r in erc.reports]
    assert len(set(hashes)) == 4
    fixed = run_federation(small, cfg_for(n_rounds=3, broadcast_mode=EMBEDDINGS_AND_RANDOM_LABELS,
                                          fixed_random_labels=True))
    assert len({r.cluster_labels_hash for r in fixed.reports}) == 1
    e = run_federation(small, cfg_for(n_rounds=2, broadcast_mode=EMBEDDINGS_ONLY))
    assert all(r.cluster_labels_hash is None for r in e.reports)


def test_labels_only_downloads_have_no_d_term(small):
    downs = []
    for d in (4, 9):
        res = run_federation(small, cfg_for(d=d, participation_rate=0.5))
        for rep in res.reports:
            assert rep.download_bytes == ours_download_bytes(len(rep.participants), small.n_items, 1)
        downs.append([r.download_bytes for r in res.reports])
    assert downs[0] == downs[1]


def test_uploads_identical_across_modes(small):
    ups = {mode: [r.upload_bytes for r in run_federation(small, cfg_for(participation_rate=0.5,
                                                                        broadcast_mode=mode)).reports]
           for mode in MODES}
    assert len({tuple(v) for v in ups.values()}) == 1


def test_download_ratio_exact(small):
    lab = run_federation(small, cfg_for(broadcast_mode=LABELS_ONLY)).ledger
    emb = run_federation(small, cfg_for(broadcast_mode=EMBEDDINGS_ONLY)).ledger
    assert lab.cumulative_down * 4 * 4 == emb.cumulative_down * 1
    both = run_federation(small, cfg_for(broadcast_mode=EMBEDDINGS_AND_LABELS)).ledger
    assert both.cumulative_down == lab.cumulative_down + emb.cumulative_down


def test_k_above_256_promotes_label_size():
    ds, _ = planted_dataset(n_clients=4, n_items=300, n_groups=2, items_per_client=5,
                            n_eval_negatives=5, seed=0)
    res = run_federation(ds, cfg_for(n_rounds=1, k=260, kmeans_max_iters=2))
    assert res.ledger.s_i == 2
    assert res.reports[0].download_bytes == 4 * 300 * 2


def _fingerprint(res):
    return ([r.to_json() for r in res.reports],
            [s.table.tobytes() + s.head.tobytes() for s in res.states],
            res.global_table.tobytes())


def test_determinism_and_worker_independence(small):
    cfg = cfg_for(participation_rate=0.75, ldp_delta=0.05)
    a = _fingerprint(run_federation(small, cfg, workers=1))
    b = _fingerprint(run_federation(small, cfg, workers=1))
    c = _fingerprint(run_federation(small, cfg, workers=4))
    assert a == b == c


def test_ldp_zero_matches_skipped_path(small, monkeypatch):
    cfg = cfg_for(ldp_delta=0.0)
    a = _fingerprint(run_federation(small, cfg))
    monkeypatch.setattr(fed, "apply_ldp", lambda upload, *args, **kw: upload)
    b = _fingerprint(run_federation(small, cfg))
    assert a == b
    monkeypatch.undo()
    c = _fingerprint(run_federation(small, replace(cfg, ldp_delta=0.1)))
    assert c != a


def test_non_participants_unchanged(small):
    sim = Simulator(small, cfg_for(participation_rate=0.25))
    before = [s.table.copy() for s in sim.states]
    rep = sim.step()
    for u, s in enumerate(sim.states):
        if u not in rep.participants:
            assert s.table.tobytes() == before[u].tobytes()
        else:
            assert s.table.tobytes() != before[u].tobytes()


def test_checkpoint_resume_bitwise(small, tmp_path):
    cfg = cfg_for(n_rounds=4, participation_rate=0.5)
    full = Simulator(small, cfg)
    full.run()
    part = Simulator(small, cfg)
    part.run(n_rounds=2)
    part.save_checkpoint(tmp_path / "ck.bin")
    resumed = Simulator.load_checkpoint(tmp_path / "ck.bin", small)
    resumed.run()
    assert _fingerprint(resumed.result()) == _fingerprint(full.result())
    assert resumed.ledger.cumulative_up == full.ledger.cumulative_up


def test_round_reports_are_json(small):
    res = run_federation(small, cfg_for(n_rounds=2))
    for rep in res.reports:
        row = json.loads(rep.to_json())
        assert row["round"] == rep.round
        assert row["upload_bytes"] == rep.upload_bytes


def test_errors_carry_round_and_client():
    # user 1 has seen every item, so negative sampling fails on its first round
    recs = Interactions(np.array([0, 0, 1, 1, 1]), np.array([0, 1, 0, 1, 2]), np.ones(5),
                        np.arange(5), np.arange(2), np.arange(3))
    ds = split_leave_one_out(recs, 0)
    with pytest.raises(RoundError) as exc:
        run_federation(ds, cfg_for(n_rounds=1, k=2))
    assert exc.value.round == 1 and exc.value.client == 1


def test_bootstrap_flag(small):
    cfg = cfg_for(n_rounds=1, bootstrap_labels=False)
    res = run_federation(small, cfg)
    assert res.reports[0].cluster_labels_hash is None
    assert res.reports[0].mean_cg_loss == 0.0


def test_config_roundtrip():
    cfg = cfg_for(broadcast_mode=EMBEDDINGS_AND_LABELS, ldp_delta=0.3)
    assert FederationConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
