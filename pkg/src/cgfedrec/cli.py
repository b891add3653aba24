"""Command-line entry point: ``python -m cgfedrec <command> [options]``.

Science parameters come from a JSON config (``--config``) with any field
overridable by a flag of the same name (``--n-rounds 30``). The only thing read
from the environment is the worker count (``CGFEDREC_WORKERS``).
"""
from __future__ import annotations

import argparse
import json
import sys
import typing
from dataclasses import fields

from . import experiments as ex
from .exceptions import CGFedRecError, UsageError


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_spec_flags(parser):
    group = parser.add_argument_group("experiment fields (override the config file)")
    hints = typing.get_type_hints(ex.ExperimentSpec)
    for f in fields(ex.ExperimentSpec):
        hint = hints[f.name]
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        base = args[0] if args else hint
        kw = {"dest": f.name, "default": argparse.SUPPRESS}
        if base is bool:
            group.add_argument(_flag(f.name), action=argparse.BooleanOptionalAction, **kw)
        elif base is tuple:
            elem = int if f.name == "grid_k" else float
            group.add_argument(_flag(f.name), nargs="+", type=elem, metavar="V", **kw)
        else:
            group.add_argument(_flag(f.name), type=base, metavar=base.__name__.upper(), **kw)


def build_parser():
    p = argparse.ArgumentParser(prog="cgfedrec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="dataset statistics (users, items, interactions, sparsity)")
    s.add_argument("path")
    s.add_argument("--format", choices=["tab_separated", "comma_separated"], default=None)
    s.add_argument("--min-count", type=int, default=None,
                   help="apply the more-than-N-interactions user filter first")

    for name, help_ in [("run", "single federated run"),
                        ("grid", "hyperparameter grid (one CSV row per cell)"),
                        ("ablation", "the four broadcast modes, Table-3 shaped"),
                        ("ldp-sweep", "upload noise sweep over delta"),
                        ("export-embeddings", "train, then write item embeddings as CSV"),
                        ("show-config", "print the resolved config and exit")]:
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="JSON experiment config")
        if name == "ldp-sweep":
            c.add_argument("--deltas", nargs="+", type=float, default=list(ex.LDP_DELTAS))
        if name == "export-embeddings":
            c.add_argument("--out", required=True, help="CSV path for the global table")
            c.add_argument("--clients", nargs="*", type=int, default=[],
                           help="also export these clients' local tables")
        if name == "run":
            c.add_argument("--quiet", action="store_true")
        _add_spec_flags(c)
    return p


def resolve_spec(ns) -> ex.ExperimentSpec:
    base = ex.ExperimentSpec.from_file(ns.config).to_dict() if ns.config else {}
    names = {f.name for f in fields(ex.ExperimentSpec)}
    overrides = {k: v for k, v in vars(ns).items() if k in names}
    if "grid_k" in overrides or "grid_lam" in overrides or "grid_tau" in overrides:
        overrides = {k: (list(v) if k in ex.GRID_KEYS else v) for k, v in overrides.items()}
    return ex.ExperimentSpec.from_dict({**base, **overrides})


def main(argv=None):
    ns = build_parser().parse_args(argv)
    try:
        return _dispatch(ns)
    except UsageError as exc:
        print(f"cgfedrec: error: {exc}", file=sys.stderr)
        return 2
    except CGFedRecError as exc:
        print(f"cgfedrec: failed: {exc}", file=sys.stderr)
        return 1


def _print_round(r):
    m = r.metrics
    val = f" val_hr={m['val_hr']:.4f}" if "val_hr" in m else ""
    print(f"round {r.round:4d} rec={r.mean_rec_loss:.4f} cg={r.mean_cg_loss:.4f}"
          f" hr={m['hr']:.4f}{val}", file=sys.stderr)


def _dispatch(ns):
    if ns.command == "stats":
        stats = ex.dataset_stats(ns.path, ns.format, ns.min_count)
        print(stats.to_json())
        return 0
    spec = resolve_spec(ns)
    if ns.command == "show-config":
        sys.stdout.write(spec.emit())
        return 0
    if ns.command == "run":
        result = ex.run_single(spec, progress=None if ns.quiet else _print_round)
        s = {k: v for k, v in result.summary.items() if k != "config"}
        print(json.dumps(s, indent=2, sort_keys=True))
        return 0
    if ns.command == "grid":
        print(ex.format_table(ex.run_grid(spec)))
        return 0
    if ns.command == "ablation":
        print(ex.format_table(ex.run_ablation_suite(spec)))
        return 0
    if ns.command == "ldp-sweep":
        print(ex.format_table(ex.run_ldp_sweep(spec, ns.deltas)))
        return 0
    if ns.command == "export-embeddings":
        for p in ex.export_embeddings(spec, ns.out, ns.clients):
            print(p)
        return 0
    raise AssertionError(ns.command)


if __name__ == "__main__":
    sys.exit(main())
