"""Experiment orchestration: single runs, grids, the ablation suite and LDP sweeps.

An :class:`ExperimentSpec` is a flat JSON document. Every run writes its
artifacts into ``output_dir``; nothing written to ``summary.json`` depends on
wall-clock time, so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import itertools
import json
import re
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import _rng
from .comms import baseline_download_bytes
from .dataset import carve_validation, compute_stats, ingest, load
from .evaluation import evaluate_all, write_per_user_csv
from .exceptions import CGFedRecError, UsageError
from .federation import (EMBEDDINGS_ONLY, LABELS_ONLY, MODES, VARIANT_NAMES,
                         FederationConfig, Simulator)
from .model import LearningRates
from .structure import ContrastiveConfig
from .synthetic import planted_dataset

SYNTHETIC = "synthetic"
LDP_DELTAS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
GRID_KEYS = ("grid_lam", "grid_tau", "grid_k")


@dataclass(frozen=True)
class ExperimentSpec:
    # data
    dataset: str = SYNTHETIC
    dataset_format: str | None = None
    min_count: int = 5
    n_eval_negatives: int = 99
    data_seed: int = 0
    syn_clients: int = 40
    syn_items: int = 200
    syn_groups: int = 4
    syn_items_per_client: int = 45
    # federation (flattened FederationConfig)
    n_rounds: int = 100
    participation_rate: float = 1.0
    broadcast_mode: str = LABELS_ONLY
    k: int = 10
    d: int = 32
    eta: float = 0.05
    eta_prime: float = 0.05
    tau: float = 0.1
    tau_base: float = 0.07
    lam: float = 0.1
    use_normalized: bool = True
    max_items: int = 8192
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
    # evaluation and stopping
    eval_k: int = 5
    full_ranking: bool = False
    early_stop_patience: int = 20  # 0 disables the validation slice entirely
    # grid axes; None means "not swept"
    grid_lam: tuple | None = None
    grid_tau: tuple | None = None
    grid_k: tuple | None = None
    output_dir: str = "runs/default"

    def __post_init__(self):
        for name in GRID_KEYS:
            v = getattr(self, name)
            if v is not None:
                if len(v) == 0:
                    raise UsageError(name, "grid list must be nonempty")
                object.__setattr__(self, name, tuple(v))
        if self.eval_k < 1:
            raise UsageError("eval_k", "must be >= 1")
        if self.early_stop_patience < 0:
            raise UsageError("early_stop_patience", "must be >= 0")
        if self.n_eval_negatives < 1:
            raise UsageError("n_eval_negatives", "must be >= 1")
        self.federation_config()  # validates the science parameters

    def federation_config(self) -> FederationConfig:
        try:
            return FederationConfig(
                n_rounds=self.n_rounds, participation_rate=self.participation_rate,
                broadcast_mode=self.broadcast_mode, k=self.k, d=self.d,
                rates=LearningRates(self.eta, self.eta_prime),
                contrastive=ContrastiveConfig(self.tau, self.tau_base, self.lam,
                                              self.use_normalized, self.max_items),
                neg_ratio=self.neg_ratio, local_epochs=self.local_epochs,
                batch_size=self.batch_size, ldp_delta=self.ldp_delta,
                ldp_mechanism=self.ldp_mechanism, seed=self.seed, aggregate=self.aggregate,
                bootstrap_labels=self.bootstrap_labels,
                fixed_random_labels=self.fixed_random_labels,
                kmeans_max_iters=self.kmeans_max_iters, kmeans_tol=self.kmeans_tol,
                kmeans_n_init=self.kmeans_n_init, s_f=self.s_f, s_i=self.s_i)
        except (ValueError, CGFedRecError) as exc:
            raise UsageError(_blame(str(exc)), str(exc)) from None

    # -- serialization ----------------------------------------------------------
    def to_dict(self):
        out = asdict(self)
        for name in GRID_KEYS:
            if out[name] is not None:
                out[name] = list(out[name])
        return out

    def emit(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(unknown[0], "unknown configuration key")
        hints = typing.get_type_hints(cls)
        clean = {}
        for key, value in data.items():
            clean[key] = _coerce(key, hints[key], value)
        return cls(**clean)

    @classmethod
    def parse(cls, text: str):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError("config", f"not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise UsageError("config", "top level must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def from_file(cls, path):
        return cls.parse(Path(path).read_text())

    def with_overrides(self, **kw):
        return ExperimentSpec.from_dict({**self.to_dict(), **kw})


def _blame(message):
    names = [f.name for f in fields(ExperimentSpec)]
    first = None
    for name in names:
        m = re.search(rf"\b{name}\b", message)
        if m and (first is None or m.start() < first[0]):
            first = (m.start(), name)
    return first[1] if first else "config"


def _coerce(key, hint, value):
    """Check a JSON value against the annotated type of ``key``."""
    args = typing.get_args(hint)
    optional = type(None) in args
    if value is None:
        if optional:
            return None
        raise UsageError(key, "must not be null")
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    if base is tuple:
        if not isinstance(value, (list, tuple)):
            raise UsageError(key, "must be a list")
        elem = int if key == "grid_k" else float
        return tuple(_coerce(key, elem, v) for v in value)
    if base is bool:
        if not isinstance(value, bool):
            raise UsageError(key, f"must be true or false, got {value!r}")
        return value
    if base is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise UsageError(key, f"must be an integer, got {value!r}")
        return int(value)
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(key, f"must be a number, got {value!r}")
        return float(value)
    if base is str:
        if not isinstance(value, str):
            raise UsageError(key, f"must be a string, got {value!r}")
        return value
    return value


# ---------------------------------------------------------------------------
# data


_DATA_CACHE: dict = {}


def load_dataset(spec: ExperimentSpec):
    """Returns ``(InteractionDataset, group_of_item or None)``; cached per data key."""
    if spec.dataset == SYNTHETIC:
        key = (SYNTHETIC, spec.syn_clients, spec.syn_items, spec.syn_groups,
               spec.syn_items_per_client, spec.n_eval_negatives, spec.data_seed)
        if key not in _DATA_CACHE:
            try:
                _DATA_CACHE[key] = planted_dataset(spec.syn_clients, spec.syn_items, spec.syn_groups,
                                                   spec.syn_items_per_client, spec.n_eval_negatives,
                                                   spec.data_seed)
            except ValueError as exc:
                raise UsageError("syn_items_per_client", str(exc)) from None
        return _DATA_CACHE[key]
    path = Path(spec.dataset)
    if not path.is_file():
        raise UsageError("dataset", f"no such file: {path}")
    key = (str(path.resolve()), path.stat().st_mtime_ns, spec.dataset_format, spec.min_count,
           spec.n_eval_negatives, spec.data_seed)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = (load(path, spec.dataset_format, spec.min_count, spec.data_seed,
                                 spec.n_eval_negatives), None)
    return _DATA_CACHE[key]


def dataset_stats(path, format=None, min_count=None):
    """Table-1 style statistics of a raw log (optionally after the min-count filter)."""
    from .dataset import filter_min_interactions

    records = ingest(path, format)
    if min_count is not None:
        records = filter_min_interactions(records, min_count)
    return compute_stats(records)


# ---------------------------------------------------------------------------
# single run


@dataclass
class RunResult:
    summary: dict
    reports: list
    simulator: Simulator
    per_user: list


def _summary(spec, ds, sim, best_round, best_metrics):
    ledger = sim.ledger
    n_p = [len(r.participants) for r in sim.reports]
    baseline = sum(baseline_download_bytes(p, ds.n_items, spec.d, spec.s_f) for p in n_p)
    K = spec.eval_k
    return {
        "variant": VARIANT_NAMES[spec.broadcast_mode],
        "broadcast_mode": spec.broadcast_mode,
        "seed": spec.seed,
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "rounds_run": sim.round,
        "best_round": best_round,
        f"hr@{K}": best_metrics["hr"],
        f"ndcg@{K}": best_metrics["ndcg"],
        f"val_hr@{K}": best_metrics.get("val_hr"),
        "upload_bytes": ledger.cumulative_up,
        "download_bytes": ledger.cumulative_down,
        "framing_bytes": ledger.cumulative_framing,
        "baseline_download_bytes": baseline,
        "reduction": 1.0 - ledger.cumulative_down / baseline,
        # where the files went is not part of the experiment
        "config": {k: v for k, v in spec.to_dict().items() if k != "output_dir"},
    }


def run_single(spec: ExperimentSpec, workers=None, write=True, progress=None) -> RunResult:
    """Train, evaluate each round, and report test metrics at the best validation round.

    With ``early_stop_patience == 0`` no validation slice is carved and the
    final round is reported.
    """
    full_ds, _ = load_dataset(spec)
    cfg = spec.federation_config()
    K = spec.eval_k
    if spec.early_stop_patience > 0:
        ds, val = carve_validation(full_ds, spec.n_eval_negatives, spec.data_seed)
    else:
        ds, val = full_ds, None
    sim = Simulator(ds, cfg, workers)
    best = {"round": 0, "val": -np.inf, "metrics": None, "per_user": None}

    def on_round(s, report):
        test = evaluate_all(s.states, ds, K, full_ranking=spec.full_ranking)
        report.metrics = {"hr": test["hr"], "ndcg": test["ndcg"]}
        if val is not None:
            v = evaluate_all(s.states, ds, K, users=val.users, targets=val.positive,
                             candidates=val.candidates)
            report.metrics["val_hr"] = v["hr"]
            report.metrics["val_ndcg"] = v["ndcg"]
            score = v["hr"]
        else:
            score = report.round  # no validation: the last round wins
        if score > best["val"]:
            best.update(round=report.round, val=score, metrics=dict(report.metrics),
                        per_user=test["per_user"])
        if progress is not None:
            progress(report)
        return val is not None and report.round - best["round"] >= spec.early_stop_patience

    sim.run(callback=on_round)
    summary = _summary(spec, ds, sim, best["round"], best["metrics"])
    result = RunResult(summary, sim.reports, sim, best["per_user"])
    if write:
        write_run(result, spec, ds)
    return result


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_run(result: RunResult, spec: ExperimentSpec, ds, out_dir=None):
    out = Path(out_dir or spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(spec.emit())
    (out / "summary.json").write_text(_dumps(result.summary))
    with open(out / "rounds.jsonl", "w") as fh:
        for r in result.reports:
            fh.write(r.to_json() + "\n")
    result.simulator.ledger.write_csv(out / "ledger.csv", spec.broadcast_mode,
                                      [len(r.participants) for r in result.reports],
                                      ds.n_items, spec.d)
    write_per_user_csv({"per_user": result.per_user}, out / "per_user.csv", spec.eval_k,
                       ds.user_ids)


def summary_from_log(path, K=5):
    """Recompute the headline numbers of a run from its ``rounds.jsonl``."""
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
    has_val = any("val_hr" in r["metrics"] for r in rows)
    best = None
    for r in rows:
        score = r["metrics"]["val_hr"] if has_val else r["round"]
        if best is None or score > best[0]:
            best = (score, r)
    row = best[1]
    return {"best_round": row["round"], f"hr@{K}": row["metrics"]["hr"],
            f"ndcg@{K}": row["metrics"]["ndcg"],
            "upload_bytes": sum(r["upload_bytes"] for r in rows),
            "download_bytes": sum(r["download_bytes"] for r in rows),
            "rounds_run": len(rows)}


# ---------------------------------------------------------------------------
# sweeps


def grid_cells(spec: ExperimentSpec):
    """Cartesian product of the provided grid axes, with per-cell seeds."""
    axes = [(name[len("grid_"):], getattr(spec, name)) for name in GRID_KEYS
            if getattr(spec, name) is not None]
    if not axes:
        raise UsageError("grid_lam", "grid mode needs at least one of grid_lam, grid_tau, grid_k")
    names = [a[0] for a in axes]
    cells = []
    for idx, values in enumerate(itertools.product(*(a[1] for a in axes))):
        seed = _rng.derive_seed(spec.seed, idx)
        override = dict(zip(names, values), seed=seed,
                        output_dir=str(Path(spec.output_dir) / f"cell_{idx:03d}"))
        for name in GRID_KEYS:
            override[name] = None
        cells.append((idx, spec.with_overrides(**override)))
    return names, cells


def _write_table(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_grid(spec: ExperimentSpec, workers=None, write=True) -> list:
    """One independent run per grid cell; returns one dict per cell."""
    names, cells = grid_cells(spec)
    K = spec.eval_k
    rows = []
    for idx, cell in cells:
        s = run_single(cell, workers, write=write).summary
        row = {"cell": idx, "seed": cell.seed}
        row.update({n: getattr(cell, n) for n in names})
        row.update({f"hr@{K}": s[f"hr@{K}"], f"ndcg@{K}": s[f"ndcg@{K}"],
                    "best_round": s["best_round"], "download_bytes": s["download_bytes"]})
        rows.append(row)
    if write:
        header = list(rows[0])
        _write_table(Path(spec.output_dir) / "grid.csv", header, [[r[h] for h in header] for r in rows])
    return rows


def run_ablation_suite(spec: ExperimentSpec, workers=None, write=True) -> list:
    """The four broadcast modes under one seed. The -E row trains without the alignment term."""
    K = spec.eval_k
    rows = []
    for mode in MODES:
        lam = 0.0 if mode == EMBEDDINGS_ONLY else spec.lam
        cell = spec.with_overrides(broadcast_mode=mode, lam=lam,
                                   output_dir=str(Path(spec.output_dir) / mode))
        s = run_single(cell, workers, write=write).summary
        rows.append({"variant": VARIANT_NAMES[mode], "mode": mode,
                     f"hr@{K}": s[f"hr@{K}"], f"ndcg@{K}": s[f"ndcg@{K}"],
                     "upload_bytes": s["upload_bytes"], "download_bytes": s["download_bytes"]})
    if write:
        header = list(rows[0])
        _write_table(Path(spec.output_dir) / "ablation.csv", header,
                     [[r[h] for h in header] for r in rows])
    return rows


def run_ldp_sweep(spec: ExperimentSpec, deltas=LDP_DELTAS, workers=None, write=True) -> list:
    K = spec.eval_k
    rows = []
    for delta in deltas:
        cell = spec.with_overrides(ldp_delta=float(delta),
                                   output_dir=str(Path(spec.output_dir) / f"delta_{delta:g}"))
        s = run_single(cell, workers, write=write).summary
        rows.append({"delta": float(delta), f"hr@{K}": s[f"hr@{K}"], f"ndcg@{K}": s[f"ndcg@{K}"]})
    if write:
        header = list(rows[0])
        _write_table(Path(spec.output_dir) / "ldp.csv", header, [[r[h] for h in header] for r in rows])
    return rows


def export_embeddings(spec: ExperimentSpec, path, clients=(), workers=None):
    """Train, then write the global table with cluster labels as CSV.

    ``clients`` adds one CSV per listed client index next to ``path``.
    """
    result = run_single(spec, workers, write=False)
    sim = result.simulator
    ds = sim.ds
    labels = sim.assignment.labels if sim.assignment is not None else np.full(ds.n_items, -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_embedding_csv(path, sim.global_table, labels, ds.item_ids)
    written = [path]
    for c in clients:
        if not 0 <= c < ds.n_users:
            raise UsageError("client", f"no client {c}")
        p = path.with_name(f"{path.stem}_client{c}{path.suffix}")
        _write_embedding_csv(p, sim.states[c].table, labels, ds.item_ids)
        written.append(p)
    return written


def _write_embedding_csv(path, table, labels, item_ids):
    d = table.shape[1]
    rows = [[int(item_ids[i]), int(labels[i])] + [repr(float(v)) for v in table[i]]
            for i in range(table.shape[0])]
    _write_table(path, ["item_id", "cluster"] + [f"e{j}" for j in range(d)], rows)


def format_table(rows, floats=4) -> str:
    """Markdown table of a list of dicts, for terminal output."""
    header = list(rows[0])
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        cells = [f"{v:.{floats}f}" if isinstance(v, float) else str(v) for v in r.values()]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)

