"""Byte accounting for uploads and downloads, and the closed-form comparison
between embedding broadcast and label broadcast."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .exceptions import ParameterError

EMBEDDING_TABLE = "embedding_table"
LABEL_VECTOR = "label_vector"
UP = "up"
DOWN = "down"


def _product(*factors):
    out = 1
    for f in factors:
        f = int(f)
        if f < 1:
            raise ParameterError(f"byte-count factors must be >= 1, got {f}")
        out *= f
    if out >= 2**63:
        raise OverflowError("byte count exceeds 63-bit range")
    return out


def baseline_download_bytes(n_participants, m, d, s_f=4) -> int:
    """Per-round download when the server broadcasts full embedding tables."""
    return _product(n_participants, m, d, s_f)


def ours_download_bytes(n_participants, m, s_i=1) -> int:
    """Per-round download when the server broadcasts only cluster labels."""
    return _product(n_participants, m, s_i)


def reduction_rate(d, s_f=4, s_i=1) -> float:
    if d * s_f <= s_i:
        raise ParameterError(f"d*s_f={d * s_f} must exceed s_i={s_i}")
    return 1.0 - s_i / (d * s_f)


def label_size(k, s_i=1):
    """Bytes per label; promoted to 2 when k does not fit in one byte."""
    return max(s_i, 2) if k > 256 else s_i


@dataclass
class RoundTraffic:
    upload_bytes: int = 0
    download_bytes: int = 0
    framing_bytes: int = 0


@dataclass
class CommLedger:
    s_f: int = 4
    s_i: int = 1
    per_round: list = field(default_factory=list)
    cumulative_up: int = 0
    cumulative_down: int = 0
    cumulative_framing: int = 0

    def __post_init__(self):
        if self.s_f < 1 or self.s_i < 1:
            raise ParameterError("s_f and s_i must be >= 1")

    def begin_round(self):
        self.per_round.append(RoundTraffic())
        return self

    @property
    def current(self) -> RoundTraffic:
        if not self.per_round:
            self.begin_round()
        return self.per_round[-1]

    def add_framing(self, n_bytes):
        self.current.framing_bytes += int(n_bytes)
        self.cumulative_framing += int(n_bytes)
        return self

    def to_rows(self, mode, n_participants, m, d):
        """Rows for the ledger CSV; ``n_participants`` is a per-round list."""
        rows = []
        for r, (traffic, n_p) in enumerate(zip(self.per_round, n_participants, strict=True), start=1):
            rows.append({
                "round": r, "mode": mode,
                "upload_bytes": traffic.upload_bytes,
                "download_bytes": traffic.download_bytes,
                "baseline_download_bytes": baseline_download_bytes(n_p, m, d, self.s_f),
                "reduction": 1.0 - traffic.download_bytes / baseline_download_bytes(n_p, m, d, self.s_f),
            })
        return rows

    def write_csv(self, path, mode, n_participants, m, d):
        rows = self.to_rows(mode, n_participants, m, d)
        fields = ["round", "mode", "upload_bytes", "download_bytes",
                  "baseline_download_bytes", "reduction"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                row = dict(row, reduction=f"{row['reduction']:.6f}")
                writer.writerow(row)


def record_transfer(ledger: CommLedger, direction, payload_kind, n_items, d_or_1=1) -> CommLedger:
    """Add one payload's bytes to the current round of ``ledger``."""
    if n_items < 0 or d_or_1 < 0:
        raise ParameterError("counts must be >= 0")
    if payload_kind == EMBEDDING_TABLE:
        n_bytes = int(n_items) * int(d_or_1) * ledger.s_f
    elif payload_kind == LABEL_VECTOR:
        n_bytes = int(n_items) * ledger.s_i
    else:
        raise ValueError(f"unknown payload kind {payload_kind!r}")
    traffic = ledger.current
    if direction == UP:
        traffic.upload_bytes += n_bytes
        ledger.cumulative_up += n_bytes
    elif direction == DOWN:
        traffic.download_bytes += n_bytes
        ledger.cumulative_down += n_bytes
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return ledger
