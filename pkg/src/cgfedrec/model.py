"""Per-client recommendation model: item embedding table + linear sigmoid head.

Embedding tables are plain ``(m, d)`` float64 arrays and the score head is a
length-``d`` vector. Gradients with respect to the table are returned as
:class:`SparseRows` so untouched rows stay bitwise identical across a step.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .exceptions import NumericError, ShapeError

EPS = 1e-12
INIT_SCALE = 0.01
_MAGIC = b"CGFEDEMB"
_HEADER = struct.Struct("<8sII")


class SparseRows(NamedTuple):
    """Row-sparse gradient: ``values[k]`` is the gradient of row ``indices[k]``."""

    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def accumulate(cls, rows, values):
        """Sum duplicate rows; output indices are sorted and unique."""
        rows = np.asarray(rows, dtype=np.int64)
        if len(rows) == 0:
            return cls(rows, np.zeros((0, values.shape[1])))
        # stable sort keeps the original order inside each run of equal rows
        order = np.argsort(rows, kind="stable")
        rows = rows[order]
        starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
        return cls(rows[starts], np.add.reduceat(np.asarray(values, dtype=np.float64)[order],
                                                 starts, axis=0))

    @classmethod
    def empty(cls, d):
        return cls(np.empty(0, dtype=np.int64), np.empty((0, d)))

    def to_dense(self, m):
        out = np.zeros((m, self.values.shape[1]))
        out[self.indices] = self.values
        return out


class TrainBatch(NamedTuple):
    item_indices: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class LearningRates:
    eta: float = 0.05  # score head
    eta_prime: float = 0.05  # embeddings

    def __post_init__(self):
        for name in ("eta", "eta_prime"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def init_table(m, d, rng) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=(m, d))


def init_head(d, rng) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=d)


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_items(table, items):
    items = np.asarray(items, dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= table.shape[0]):
        raise IndexError(f"item index out of range [0, {table.shape[0]})")
    return items


def logits(head, table, items) -> np.ndarray:
    items = _check_items(table, items)
    return table[items] @ head


def scores(head, table, items) -> np.ndarray:
    """Vectorised :func:`predict` over an index array."""
    return sigmoid(logits(head, table, items))


def predict(head, table, item) -> float:
    return float(scores(head, table, np.atleast_1d(item))[0])


def bce_loss(head, table, batch: TrainBatch) -> float:
    """Summed (not averaged) binary cross-entropy over the batch."""
    if len(batch.item_indices) == 0:
        raise ValueError("empty batch")
    r_hat = np.clip(scores(head, table, batch.item_indices), EPS, 1.0 - EPS)
    y = np.asarray(batch.labels, dtype=np.float64)
    return float(-np.sum(y * np.log(r_hat) + (1.0 - y) * np.log1p(-r_hat)))


def bce_gradients(head, table, batch: TrainBatch):
    """Analytic gradients of :func:`bce_loss`.

    Returns ``(grad_w, grad_E)`` where ``grad_E`` is a :class:`SparseRows`
    covering exactly the items in the batch.
    """
    if len(batch.item_indices) == 0:
        raise ValueError("empty batch")
    items = _check_items(table, batch.item_indices)
    emb = table[items]
    resid = sigmoid(emb @ head) - np.asarray(batch.labels, dtype=np.float64)
    grad_w = resid @ emb
    grad_E = SparseRows.accumulate(items, np.outer(resid, head))
    return grad_w, grad_E


def _merge(a: SparseRows, b: SparseRows) -> SparseRows:
    if len(b.indices) == 0:
        return a
    if len(a.indices) == 0:
        return b
    return SparseRows.accumulate(np.concatenate((a.indices, b.indices)),
                                 np.vstack((a.values, b.values)))


def sgd_step(head, table, grad_w, grad_E: SparseRows, grad_E_extra=None,
             rates: LearningRates = LearningRates()):
    """One in-place SGD update; returns ``(head, table)``.

    ``grad_E_extra`` is added to the table gradient before the step. It may be
    a :class:`SparseRows`, a dense ``(m, d)`` array or ``None``.
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape != head.shape:
        raise ShapeError(f"grad_w shape {grad_w.shape} != head shape {head.shape}")
    if isinstance(grad_E_extra, np.ndarray):
        if grad_E_extra.shape != table.shape:
            raise ShapeError(f"grad_E_extra shape {grad_E_extra.shape} != table {table.shape}")
        grad_E_extra = SparseRows(np.arange(table.shape[0]), grad_E_extra)
    for name, g in (("score head", grad_w), ("embedding table", grad_E.values),
                    ("contrastive term", None if grad_E_extra is None else grad_E_extra.values)):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    total = grad_E if grad_E_extra is None else _merge(grad_E, grad_E_extra)
    if total.values.shape[1:] != table.shape[1:]:
        raise ShapeError("embedding gradient width does not match table")
    head -= rates.eta * grad_w
    if len(total.indices):
        table[total.indices] -= rates.eta_prime * total.values
    return head, table


def save_table(table, path):
    """Binary row-major float64 with a 16-byte header ``(magic, m, d)``."""
    table = np.ascontiguousarray(table, dtype="<f8")
    m, d = table.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, m, d))
        fh.write(table.tobytes())


def load_table(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, m, d = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not an embedding table (bad magic {magic!r})")
    body = raw[_HEADER.size:]
    if len(body) != 8 * m * d:
        raise ValueError(f"{path}: expected {8 * m * d} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(m, d).astype(np.float64)


def save_table_csv(table, path, item_ids=None):
    m, d = table.shape
    ids = np.arange(m) if item_ids is None else np.asarray(item_ids)
    header = ",".join(["item"] + [f"e{j}" for j in range(d)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i in range(m):
            fh.write(str(ids[i]) + "," + ",".join(repr(float(v)) for v in table[i]) + "\n")


def load_table_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1:]
