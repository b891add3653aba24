"""Server-side structure discovery and client-side cluster-guided alignment.

The server averages uploaded item tables and runs K-means over the result; the
only thing clients receive back is the label vector. Clients turn the labels
into a same-cluster mask and minimise a supervised contrastive loss over their
own item embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .comms import label_size
from .exceptions import NumericError, ParameterError, ShapeError
from .model import SparseRows


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    k: int
    inertia: float = 0.0
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def m(self):
        return len(self.labels)


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    tau_base: float = 0.07
    lam: float = 0.1
    use_normalized: bool = True
    max_items: int = 8192  # above this, a per-round item subsample is used

    def __post_init__(self):
        for name in ("tau", "tau_base"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if self.max_items < 2:
            raise ValueError("max_items must be >= 2")


@dataclass(frozen=True)
class PairMask:
    """Same-cluster relation; ``matrix[i, j]`` is set iff ``i != j`` and labels match."""

    labels: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return _same_cluster(self.labels)

    def __len__(self):
        return len(self.labels)


def _same_cluster(labels):
    mask = labels[:, None] == labels[None, :]
    np.fill_diagonal(mask, False)
    return mask


# ---------------------------------------------------------------------------
# server side


def aggregate(tables, coverage, previous_global, mode="coverage") -> np.ndarray:
    """Average uploaded tables into the global item table.

    ``mode="coverage"``: row ``i`` is the mean over clients whose coverage flag
    for ``i`` is set; rows nobody covered keep ``previous_global``.
    ``mode="plain_mean"``: the unweighted mean of all uploaded tables.
    Tables are summed in the order given, so pass them sorted by client id.
    """
    if len(tables) == 0:
        raise ShapeError("aggregate needs at least one table")
    shape = np.shape(previous_global)
    for t in tables:
        if np.shape(t) != shape:
            raise ShapeError(f"table shape {np.shape(t)} != global shape {shape}")
    if mode == "plain_mean":
        total = np.zeros(shape)
        for t in tables:
            total += t
        return total / len(tables)
    if mode != "coverage":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    total = np.zeros(shape)
    counts = np.zeros(shape[0])
    for t, cov in zip(tables, coverage, strict=True):
        cov = np.asarray(cov, dtype=bool)
        total[cov] += t[cov]
        counts += cov
    out = np.array(previous_global, dtype=np.float64, copy=True)
    hit = counts > 0
    out[hit] = total[hit] / counts[hit, None]
    return out


def _sq_distances(X, C):
    out = np.empty((X.shape[0], C.shape[0]))
    step = max(1, 2_000_000 // max(1, C.shape[0] * X.shape[1]))
    for lo in range(0, X.shape[0], step):
        diff = X[lo:lo + step, None, :] - C[None, :, :]
        out[lo:lo + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _kmeans_pp(X, k, rng):
    m = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    first = int(rng.integers(m))
    centroids[0] = X[first]
    d2 = _sq_distances(X, centroids[:1])[:, 0]
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            idx = int(rng.integers(m))
        centroids[c] = X[idx]
        d2 = np.minimum(d2, _sq_distances(X, centroids[c:c + 1])[:, 0])
    return centroids


def _update_centroids(X, labels, d2, k):
    """Cluster means; empty clusters take the point farthest from its centroid."""
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        donors = counts[labels] > 1
        cand = np.where(donors, d2, -1.0)
        idx = int(np.argmax(cand))
        counts[labels[idx]] -= 1
        labels[idx] = j
        counts[j] = 1
        d2[idx] = 0.0
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    return sums / counts[:, None]


def kmeans(table, k, seed=0, max_iters=100, tol=1e-6, n_init=1) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeding on squared Euclidean distance.

    With ``n_init > 1`` the run is repeated from independent seedings and the
    lowest-inertia result is kept (first one wins ties).
    """
    X = np.asarray(table, dtype=np.float64)
    m = X.shape[0]
    if not 1 <= k <= m:
        raise ParameterError(f"k must satisfy 1 <= k <= m={m}, got {k}")
    if max_iters < 1 or tol < 0 or n_init < 1:
        raise ParameterError("max_iters and n_init must be >= 1 and tol >= 0")
    best = None
    for start in range(n_init):
        keys = (_rng.KMEANS,) if start == 0 else (_rng.KMEANS, start)
        run = _lloyd(X, k, _rng.derive_rng(seed, *keys), max_iters, tol)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def _lloyd(X, k, rng, max_iters, tol):
    m = X.shape[0]
    centroids = _kmeans_pp(X, k, rng)
    history = []
    scale = max(1.0, float(np.sum(X * X)))

    def record(inertia):
        if history and inertia > history[-1] + 1e-12 * scale:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)

    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d2_all = _sq_distances(X, centroids)
        labels = np.argmin(d2_all, axis=1)
        d2 = d2_all[np.arange(m), labels]
        record(float(d2.sum()))
        new = _update_centroids(X, labels, d2, k)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break
    d2_all = _sq_distances(X, centroids)
    labels = np.argmin(d2_all, axis=1)
    d2 = d2_all[np.arange(m), labels]
    if len(np.unique(labels)) < k:
        # coincident centroids (duplicate points) can still leave a cluster empty
        centroids = _update_centroids(X, labels, d2, k)
        d2 = np.sum((X - centroids[labels]) ** 2, axis=1)
    inertia = float(d2.sum())
    record(inertia)
    return ClusterAssignment(labels.astype(np.int64), centroids, k, inertia, history, n_iter)


def random_labels(m, k, seed, d=0) -> ClusterAssignment:
    if k < 1:
        raise ParameterError("k must be >= 1")
    labels = _rng.derive_rng(seed, _rng.RANDOM_LABELS).integers(0, k, size=m)
    return ClusterAssignment(labels.astype(np.int64), np.zeros((k, d)), k, 0.0)


def build_mask(assign) -> PairMask:
    labels = assign.labels if isinstance(assign, ClusterAssignment) else assign
    return PairMask(np.asarray(labels, dtype=np.int64))


def label_dtype(itemsize):
    return np.dtype({1: "u1", 2: "<u2", 4: "<u4"}[itemsize])


def encode_labels(assign: ClusterAssignment, s_i=None) -> bytes:
    """Broadcast payload: ``s_i`` unsigned bytes per item.

    ``s_i`` defaults to 1, or 2 when ``k > 256``.
    """
    s_i = label_size(assign.k) if s_i is None else s_i
    if assign.k > 256**s_i:
        raise ParameterError(f"k={assign.k} does not fit in {s_i}-byte labels")
    return np.ascontiguousarray(assign.labels, dtype=label_dtype(s_i)).tobytes()


def decode_labels(payload: bytes, s_i=1) -> np.ndarray:
    return np.frombuffer(payload, dtype=label_dtype(s_i)).astype(np.int64)


def save_centroids_csv(assign: ClusterAssignment, path):
    np.savetxt(path, assign.centroids, delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------------------
# client side


class ContrastivePlan:
    """Label-dependent terms of the contrastive loss for a fixed item subset.

    Labels and the item subset do not change within a round, so clients build
    one plan per round and evaluate it once per batch.
    """

    def __init__(self, labels, items=None, m=None):
        labels = labels.labels if isinstance(labels, PairMask) else np.asarray(labels)
        if items is None:
            items = np.arange(len(labels) if m is None else m)
        else:
            items = np.unique(np.asarray(items, dtype=np.int64))
        if len(items) < 2:
            raise ValueError("contrastive loss needs at least 2 items")
        self.items = items
        M = _same_cluster(labels[items])
        n_pos = M.sum(axis=1)
        self.has = n_pos > 0
        # row i of ``weights`` averages over the positives of i
        self.weights = M / np.where(self.has, n_pos, 1)[:, None]

    def loss_and_grad(self, table, cfg: ContrastiveConfig):
        items = self.items
        n = len(items)
        X = table[items]
        if cfg.use_normalized:
            norms = np.linalg.norm(X, axis=1)
            bad = np.flatnonzero(norms == 0)
            if len(bad):
                raise NumericError(f"zero-norm embedding for item {int(items[bad[0]])}")
            Z = X / norms[:, None]
        else:
            Z = X
        S = (Z @ Z.T) / cfg.tau
        np.fill_diagonal(S, -np.inf)
        row_max = S.max(axis=1)
        P = np.exp(S - row_max[:, None])
        denom = P.sum(axis=1)
        lse = row_max + np.log(denom)
        P /= denom[:, None]
        np.fill_diagonal(S, 0.0)
        omega = np.einsum("ij,ij->i", self.weights, S) - np.where(self.has, lse, 0.0)
        c = (cfg.tau / cfg.tau_base) / n
        loss = -c * float(omega.sum())

        P[~self.has] = 0.0
        G = c * (P - self.weights)
        dZ = ((G + G.T) @ Z) / cfg.tau
        if cfg.use_normalized:
            dX = (dZ - Z * np.sum(Z * dZ, axis=1, keepdims=True)) / norms[:, None]
        else:
            dX = dZ
        return loss, SparseRows(items, dX)


def contrastive_loss_and_grad(table, mask, cfg: ContrastiveConfig, items=None):
    """Cluster-guided supervised contrastive loss and its exact gradient.

    ``items`` restricts the loss to a subset of rows (it then plays the role of
    the full item set, including in the ``1/m`` average). The gradient is a
    :class:`SparseRows` over those rows.
    """
    return ContrastivePlan(mask, items, table.shape[0]).loss_and_grad(table, cfg)


def contrastive_loss(table, mask, cfg: ContrastiveConfig, items=None) -> float:
    return contrastive_loss_and_grad(table, mask, cfg, items)[0]


def contrastive_gradients(table, mask, cfg: ContrastiveConfig, items=None) -> SparseRows:
    return contrastive_loss_and_grad(table, mask, cfg, items)[1]
