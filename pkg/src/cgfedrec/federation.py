"""Round-based federated training with label (or embedding) broadcast.

Each round: sample participants, broadcast according to the mode, run local
SGD on every participant, collect (optionally noised) uploads, aggregate them
into the global item table and re-cluster it.

All randomness is keyed on ``(seed, purpose, round, client)`` and uploads are
aggregated in client-id order, so results do not depend on how many worker
threads run the client updates.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from math import ceil
from typing import NamedTuple

import numpy as np

from . import _rng
from .comms import (DOWN, EMBEDDING_TABLE, LABEL_VECTOR, UP, CommLedger,
                    RoundTraffic, label_size, record_transfer)
from .dataset import InteractionDataset, sample_train_negatives
from .exceptions import CGFedRecError, ParameterError, RoundError
from .model import (LearningRates, SparseRows, TrainBatch, bce_gradients,
                    bce_loss, init_head, init_table, sgd_step)
from .structure import (ClusterAssignment, ContrastiveConfig, ContrastivePlan, aggregate,
                        decode_labels, encode_labels, kmeans, random_labels)

LABELS_ONLY = "labels_only"
EMBEDDINGS_ONLY = "embeddings_only"
EMBEDDINGS_AND_LABELS = "embeddings_and_labels"
EMBEDDINGS_AND_RANDOM_LABELS = "embeddings_and_random_labels"
MODES = (LABELS_ONLY, EMBEDDINGS_ONLY, EMBEDDINGS_AND_LABELS, EMBEDDINGS_AND_RANDOM_LABELS)
VARIANT_NAMES = {
    LABELS_ONLY: "CGFedRec",
    EMBEDDINGS_ONLY: "CGFedRec-E",
    EMBEDDINGS_AND_LABELS: "CGFedRec-EC",
    EMBEDDINGS_AND_RANDOM_LABELS: "CGFedRec-ERC",
}
_WIRE_FLOAT = {2: "<f2", 4: "<f4", 8: "<f8"}
WORKERS_ENV = "CGFEDREC_WORKERS"


@dataclass(frozen=True)
class FederationConfig:
    n_rounds: int = 100
    participation_rate: float = 1.0
    broadcast_mode: str = LABELS_ONLY
    k: int = 10
    d: int = 32
    rates: LearningRates = field(default_factory=LearningRates)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    neg_ratio: int = 4
    local_epochs: int = 1
    batch_size: int = 256
    ldp_delta: float = 0.0
    ldp_mechanism: str = "laplace"
    seed: int = 0
    aggregate: str = "coverage"
    bootstrap_labels: bool = True
    fixed_random_labels: bool = False
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    kmeans_n_init: int = 10
    s_f: int = 4
    s_i: int = 1

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ParameterError("n_rounds must be >= 1")
        if not 0 < self.participation_rate <= 1:
            raise ParameterError("participation_rate must be in (0, 1]")
        if self.broadcast_mode not in MODES:
            raise ParameterError(f"broadcast_mode must be one of {MODES}")
        if self.k < 1 or self.d < 1:
            raise ParameterError("k and d must be >= 1")
        if self.neg_ratio < 1 or self.batch_size < 1 or self.local_epochs < 0:
            raise ParameterError("neg_ratio, batch_size must be >= 1 and local_epochs >= 0")
        if not (np.isfinite(self.ldp_delta) and self.ldp_delta >= 0):
            raise ParameterError("ldp_delta must be finite and >= 0")
        if self.ldp_mechanism not in ("laplace", "gaussian"):
            raise ParameterError("ldp_mechanism must be 'laplace' or 'gaussian'")
        if self.aggregate not in ("coverage", "plain_mean"):
            raise ParameterError("aggregate must be 'coverage' or 'plain_mean'")
        if self.s_f not in _WIRE_FLOAT:
            raise ParameterError(f"s_f must be one of {sorted(_WIRE_FLOAT)}")
        if self.s_i not in (1, 2, 4):
            raise ParameterError("s_i must be 1, 2 or 4")

    @property
    def sends_labels(self):
        return self.broadcast_mode != EMBEDDINGS_ONLY

    @property
    def sends_embeddings(self):
        return self.broadcast_mode != LABELS_ONLY

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if isinstance(data.get("rates"), dict):
            data["rates"] = LearningRates(**data["rates"])
        if isinstance(data.get("contrastive"), dict):
            data["contrastive"] = ContrastiveConfig(**data["contrastive"])
        return cls(**data)


@dataclass
class ClientState:
    client_id: int
    table: np.ndarray
    head: np.ndarray
    train_items: np.ndarray


class Upload(NamedTuple):
    table: np.ndarray
    coverage: np.ndarray


@dataclass
class RoundReport:
    round: int
    participants: list
    mean_rec_loss: float
    mean_cg_loss: float
    weighted_objective: float
    upload_bytes: int
    download_bytes: int
    cluster_labels_hash: int | None
    inertia: float
    metrics: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def labels_hash(labels) -> int:
    digest = hashlib.blake2b(np.ascontiguousarray(labels, dtype="<i8").tobytes(), digest_size=8)
    return int.from_bytes(digest.digest(), "little") >> 1


def n_participants(n_clients, gamma) -> int:
    # exact decimal arithmetic: 0.3 * 10 must give 3, not 4
    return ceil(Fraction(repr(float(gamma))) * n_clients)


def select_participants(all_clients, gamma, round, seed) -> np.ndarray:
    """``ceil(gamma * n)`` distinct clients, uniform without replacement, sorted."""
    if not 0 < gamma <= 1:
        raise ParameterError("gamma must be in (0, 1]")
    count = n_participants(all_clients, gamma)
    if count >= all_clients:
        return np.arange(all_clients)
    rng = _rng.derive_rng(seed, _rng.PARTICIPANTS, round)
    return np.sort(rng.choice(all_clients, size=count, replace=False))


def apply_ldp(upload, delta, seed, mechanism="laplace") -> np.ndarray:
    """Element-wise zero-mean noise of scale ``delta``; ``delta == 0`` is the identity."""
    if delta < 0:
        raise ParameterError("delta must be >= 0")
    if delta == 0:
        return upload
    rng = _rng.derive_rng(seed, _rng.LDP)
    if mechanism == "laplace":
        noise = rng.laplace(0.0, delta, size=np.shape(upload))
    elif mechanism == "gaussian":
        noise = rng.normal(0.0, delta, size=np.shape(upload))
    else:
        raise ParameterError(f"unknown LDP mechanism {mechanism!r}")
    return upload + noise


def init_client(client_id, ds: InteractionDataset, cfg: FederationConfig) -> ClientState:
    rng = _rng.derive_rng(cfg.seed, _rng.INIT_CLIENT, client_id)
    table = init_table(ds.n_items, cfg.d, rng)
    head = init_head(cfg.d, rng)
    return ClientState(client_id, table, head, ds.train_positives[client_id])


def init_global(ds: InteractionDataset, cfg: FederationConfig) -> np.ndarray:
    return init_table(ds.n_items, cfg.d, _rng.derive_rng(cfg.seed, _rng.INIT_GLOBAL))


def client_round(state: ClientState, ds: InteractionDataset, labels, global_emb,
                 cfg: FederationConfig, round: int):
    """Local training for one participant.

    Returns ``(new_state, Upload, (rec_loss, cg_loss))``. ``labels`` is a label
    array or :class:`ClusterAssignment` (or ``None``); ``global_emb`` overwrites
    the local table before training when given.
    """
    u = state.client_id
    table = np.array(global_emb if global_emb is not None else state.table, dtype=np.float64, copy=True)
    head = state.head.copy()
    m = table.shape[0]
    coverage = np.zeros(m, dtype=bool)
    if isinstance(labels, ClusterAssignment):
        labels = labels.labels
    cc = cfg.contrastive
    use_cg = labels is not None and cc.lam > 0
    plan = None
    if use_cg:
        cg_items = None
        if m > cc.max_items:
            cg_items = _rng.derive_rng(cfg.seed, _rng.CG_SUBSAMPLE, round, u).choice(
                m, size=cc.max_items, replace=False)
        plan = ContrastivePlan(labels, cg_items, m)

    pos = state.train_items
    rec_total, cg_losses = 0.0, []
    for epoch in range(cfg.local_epochs):
        negs = sample_train_negatives(ds, u, cfg.neg_ratio, _rng.derive_seed(cfg.seed, round, epoch))
        items = np.concatenate((pos, negs))
        y = np.concatenate((np.ones(len(pos)), np.zeros(len(negs))))
        order = _rng.derive_rng(cfg.seed, _rng.SHUFFLE, round, u, epoch).permutation(len(items))
        for lo in range(0, len(items), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = TrainBatch(items[idx], y[idx])
            rec_total += bce_loss(head, table, batch)
            grad_w, grad_E = bce_gradients(head, table, batch)
            extra = None
            if use_cg:
                cg_loss, g = plan.loss_and_grad(table, cc)
                cg_losses.append(cg_loss)
                extra = SparseRows(g.indices, cc.lam * g.values)
            sgd_step(head, table, grad_w, grad_E, extra, cfg.rates)
            coverage[batch.item_indices] = True
    rec_loss = rec_total / cfg.local_epochs if cfg.local_epochs else 0.0
    cg_loss = float(np.mean(cg_losses)) if cg_losses else 0.0
    new_state = replace(state, table=table, head=head)
    return new_state, Upload(table, coverage), (rec_loss, cg_loss)


def _wire(table, s_f) -> bytes:
    return np.ascontiguousarray(table, dtype=_WIRE_FLOAT[s_f]).tobytes()


def _unwire(payload, shape, s_f) -> np.ndarray:
    return np.frombuffer(payload, dtype=_WIRE_FLOAT[s_f]).astype(np.float64).reshape(shape)


@dataclass
class FederationResult:
    states: list
    reports: list
    ledger: CommLedger
    global_table: np.ndarray
    assignment: ClusterAssignment | None


def _workers(workers):
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, int(workers))


class Simulator:
    """Holds the full federation state between rounds.

    ``step()`` runs one round; ``save_checkpoint``/``load_checkpoint`` persist
    everything needed to continue bitwise-identically.
    """

    def __init__(self, ds: InteractionDataset, cfg: FederationConfig, workers=None):
        self.ds = ds
        self.cfg = cfg
        self.workers = _workers(workers)
        self.states = [init_client(u, ds, cfg) for u in range(ds.n_users)]
        self.global_table = init_global(ds, cfg)
        self.assignment = None
        if cfg.bootstrap_labels:
            self.assignment = self._cluster(0)
        self.ledger = CommLedger(cfg.s_f, label_size(cfg.k, cfg.s_i))
        self.reports = []
        self.round = 0
        self._data_sizes = np.array([len(t) for t in ds.train_positives], dtype=np.float64)

    # -- server ---------------------------------------------------------------
    def _cluster(self, round_no):
        k = min(self.cfg.k, self.ds.n_items)
        return kmeans(self.global_table, k, _rng.derive_seed(self.cfg.seed, round_no),
                      self.cfg.kmeans_max_iters, self.cfg.kmeans_tol,
                      self.cfg.kmeans_n_init)

    def _broadcast_labels(self, round_no):
        cfg = self.cfg
        if cfg.broadcast_mode == EMBEDDINGS_ONLY:
            return None
        if cfg.broadcast_mode == EMBEDDINGS_AND_RANDOM_LABELS:
            seed = cfg.seed if cfg.fixed_random_labels else _rng.derive_seed(cfg.seed, round_no)
            return random_labels(self.ds.n_items, cfg.k, seed, cfg.d)
        return self.assignment

    def step(self) -> RoundReport:
        cfg, ds = self.cfg, self.ds
        t = self.round + 1
        m, d = ds.n_items, cfg.d
        participants = select_participants(ds.n_users, cfg.participation_rate, t, cfg.seed)
        self.ledger.begin_round()

        # downstream payloads, one copy per participant
        assign = self._broadcast_labels(t)
        labels = global_emb = None
        label_payload = emb_payload = None
        if assign is not None:
            label_payload = encode_labels(assign, self.ledger.s_i)
            labels = decode_labels(label_payload, self.ledger.s_i)
        if cfg.sends_embeddings:
            emb_payload = _wire(self.global_table, cfg.s_f)
            global_emb = _unwire(emb_payload, (m, d), cfg.s_f)
        for _ in participants:
            if label_payload is not None:
                record_transfer(self.ledger, DOWN, LABEL_VECTOR, m)
            if emb_payload is not None:
                record_transfer(self.ledger, DOWN, EMBEDDING_TABLE, m, d)
        expected_down = len(participants) * ((len(label_payload) if label_payload is not None else 0)
                                             + (len(emb_payload) if emb_payload is not None else 0))
        assert self.ledger.current.download_bytes == expected_down

        def work(u):
            try:
                new_state, upload, losses = client_round(self.states[u], ds, labels, global_emb, cfg, t)
                noisy = apply_ldp(upload.table, cfg.ldp_delta, _rng.derive_seed(cfg.seed, t, u),
                                  cfg.ldp_mechanism)
                return new_state, Upload(noisy, upload.coverage), losses
            except CGFedRecError as exc:
                raise RoundError(t, int(u), exc) from exc

        if self.workers > 1 and len(participants) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(work, participants))
        else:
            results = [work(u) for u in participants]

        tables, coverages, recs, cgs = [], [], [], []
        for u, (new_state, upload, (rec, cg)) in zip(participants, results):
            self.states[u] = new_state
            payload = _wire(upload.table, cfg.s_f)
            record_transfer(self.ledger, UP, EMBEDDING_TABLE, m, d)
            self.ledger.add_framing((m + 7) // 8)  # coverage bitmap
            tables.append(_unwire(payload, (m, d), cfg.s_f))
            coverages.append(upload.coverage)
            recs.append(rec)
            cgs.append(cg)

        try:
            self.global_table = aggregate(tables, coverages, self.global_table, cfg.aggregate)
            self.assignment = self._cluster(t)
        except CGFedRecError as exc:
            raise RoundError(t, None, exc) from exc

        alpha = self._data_sizes[participants] / self._data_sizes.sum()
        objective = float(np.sum(alpha * (np.array(recs) + cfg.contrastive.lam * np.array(cgs)))
                          / len(participants))
        traffic: RoundTraffic = self.ledger.current
        report = RoundReport(
            round=t, participants=[int(p) for p in participants],
            mean_rec_loss=float(np.mean(recs)), mean_cg_loss=float(np.mean(cgs)),
            weighted_objective=objective,
            upload_bytes=traffic.upload_bytes, download_bytes=traffic.download_bytes,
            cluster_labels_hash=None if assign is None else labels_hash(assign.labels),
            inertia=self.assignment.inertia,
        )
        self.reports.append(report)
        self.round = t
        return report

    def run(self, n_rounds=None, callback=None) -> FederationResult:
        """Run until ``n_rounds`` total rounds are done or ``callback`` returns True."""
        n_rounds = self.cfg.n_rounds if n_rounds is None else n_rounds
        while self.round < n_rounds:
            report = self.step()
            if callback is not None and callback(self, report):
                break
        return self.result()

    def result(self) -> FederationResult:
        return FederationResult(self.states, self.reports, self.ledger,
                                self.global_table, self.assignment)

    # -- persistence ------------------------------------------------------------
    def save_checkpoint(self, path):
        meta = {
            "config": self.cfg.to_dict(),
            "round": self.round,
            "reports": [asdict(r) for r in self.reports],
            "ledger": {"s_f": self.ledger.s_f, "s_i": self.ledger.s_i,
                       "per_round": [asdict(x) for x in self.ledger.per_round]},
            "assignment": None if self.assignment is None else {
                "k": self.assignment.k, "inertia": self.assignment.inertia,
                "inertia_history": self.assignment.inertia_history,
                "n_iter": self.assignment.n_iter},
        }
        arrays = {
            "tables": np.stack([s.table for s in self.states]),
            "heads": np.stack([s.head for s in self.states]),
            "global_table": self.global_table,
        }
        if self.assignment is not None:
            arrays["labels"] = self.assignment.labels
            arrays["centroids"] = self.assignment.centroids
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
            zf.writestr("arrays.npz", buf.getvalue())

    @classmethod
    def load_checkpoint(cls, path, ds: InteractionDataset, workers=None):
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = np.load(io.BytesIO(zf.read("arrays.npz")))
            arrays = {k: arrays[k] for k in arrays.files}
        sim = cls.__new__(cls)
        sim.ds = ds
        sim.cfg = FederationConfig.from_dict(meta["config"])
        sim.workers = _workers(workers)
        sim.states = [ClientState(u, arrays["tables"][u].copy(), arrays["heads"][u].copy(),
                                  ds.train_positives[u]) for u in range(ds.n_users)]
        sim.global_table = arrays["global_table"]
        sim.assignment = None
        if meta["assignment"] is not None:
            a = meta["assignment"]
            sim.assignment = ClusterAssignment(arrays["labels"], arrays["centroids"], a["k"],
                                               a["inertia"], a["inertia_history"], a["n_iter"])
        led = meta["ledger"]
        sim.ledger = CommLedger(led["s_f"], led["s_i"])
        for row in led["per_round"]:
            sim.ledger.per_round.append(RoundTraffic(**row))
        sim.ledger.cumulative_up = sum(r.upload_bytes for r in sim.ledger.per_round)
        sim.ledger.cumulative_down = sum(r.download_bytes for r in sim.ledger.per_round)
        sim.ledger.cumulative_framing = sum(r.framing_bytes for r in sim.ledger.per_round)
        sim.reports = [RoundReport(**r) for r in meta["reports"]]
        sim.round = meta["round"]
        sim._data_sizes = np.array([len(t) for t in ds.train_positives], dtype=np.float64)
        return sim


def run_federation(ds: InteractionDataset, cfg: FederationConfig, workers=None,
                   callback=None) -> FederationResult:
    return Simulator(ds, cfg, workers).run(callback=callback)
