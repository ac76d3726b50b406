"""Command line entry point.

    fedhf run      full pipeline for one seed
    fedhf graph    build and write the feature graph only
    fedhf compare  score several methods over several seeds
    fedhf serve    server side of a multi-process run (waits for clients)
    fedhf client   one client process of a multi-process run
    fedhf inspect  summarize a manifest, graph, checkpoint or run directory
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import numkit
from .experiment import (ConfigError, ExperimentConfig, make_client, prepare, run_compare,
                         run_experiment, run_graph_only)
from .federation import serve_client

# flag -> (config field, type)
FLAGS = {
    "--dataset": ("dataset", str),
    "--missing-token": ("missing_token", str),
    "--synthetic": ("synthetic", str),
    "--clients": ("clients", int),
    "--keep": ("keep", float),
    "--graph-k": ("graph_k", int),
    "--min-support": ("min_support", int),
    "--embed-dim": ("embed_dim", int),
    "--layers": ("layers", int),
    "--hidden": ("hidden", int),
    "--rho": ("rho", float),
    "--batch": ("batch", int),
    "--epochs": ("epochs", int),
    "--lr": ("lr", float),
    "--rounds": ("rounds", int),
    "--patience": ("patience", int),
    "--participation": ("participation", int),
    "--corrupt": ("corrupt", float),
    "--seeds": ("seeds", int),
    "--seed": ("seed", int),
    "--mode": ("mode", str),
    "--listen": ("listen", str),
    "--connect": ("connect", str),
    "--out": ("out", str),
    "--standardize": ("standardize", str),
    "--workers": ("workers", int),
    "--methods": ("methods", str),
}

ALIASES = {"--graph-k": ("--k",)}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    for flag, (dest, typ) in FLAGS.items():
        names = [flag, *ALIASES.get(flag, ())]
        p.add_argument(*names, dest=dest, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedhf", description="Federated imputation over heterogeneous schemas")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("run", "full pipeline for one seed"),
                            ("graph", "build and emit the feature graph only"),
                            ("compare", "multi-method, multi-seed evaluation"),
                            ("serve", "server of a multi-process run")]:
        _add_common(sub.add_parser(name, help=help_text))
    client = sub.add_parser("client", help="client process of a multi-process run")
    _add_common(client)
    client.add_argument("--client-id", type=int, required=True)
    inspect = sub.add_parser("inspect", help="summarize an artifact")
    inspect.add_argument("path")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    doc: dict = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    config = ExperimentConfig.from_dict(doc)
    if "out" not in doc and os.environ.get("FEDHF_OUT"):
        config = replace(config, out=os.environ["FEDHF_OUT"])
    overrides = {dest: getattr(args, dest) for dest, _ in FLAGS.values() if getattr(args, dest) is not None}
    if "dataset" in overrides:
        overrides.setdefault("synthetic", None)
    elif "synthetic" in overrides:
        overrides["dataset"] = None
    return replace(config, **overrides).validate()


def inspect(path: Path) -> str:
    if path.is_dir():
        lines = [f"run directory {path}"]
        for name in ("eval.json", "comparison.json"):
            if (path / name).exists():
                lines.append((path / name).read_text().rstrip())
        return "\n".join(lines)
    if path.suffix == ".fhf":
        params = numkit.deserialize_params(path.read_bytes())
        total = sum(a.size for a in params.values())
        lines = [f"checkpoint {path}: {len(params)} tensors, {total} values"]
        lines += [f"  {name}: {a.shape[0]}x{a.shape[1]}" for name, a in params.items()]
        side = path.with_suffix(".json")
        if side.exists():
            lines.append("  sidecar: " + json.dumps(json.loads(side.read_text()), sort_keys=True))
        return "\n".join(lines)
    doc = json.loads(path.read_text())
    if isinstance(doc, dict) and "edges" in doc:
        deg = np.bincount([e[1] for e in doc["edges"]], minlength=doc["n_nodes"]) if doc["edges"] else \
            np.zeros(doc["n_nodes"], dtype=int)
        return (f"graph {path}: {doc['n_nodes']} nodes, {len(doc['edges'])} edges, k={doc.get('k')}, "
                f"in-degree min/max {deg.min() if len(deg) else 0}/{deg.max() if len(deg) else 0}")
    if isinstance(doc, dict) and "clients" in doc:
        lines = [f"manifest {path}: seed {doc['seed']}, {len(doc['feature_names'])} features, "
                 f"{len(doc['test_rows'])} test rows"]
        for c in doc["clients"]:
            lines.append(f"  client {c['client_id']}: {c['n_available']} available features, "
                         f"{len(c['train_rows'])} train / {len(c['val_rows'])} validation rows")
        return "\n".join(lines)
    return json.dumps(doc, indent=2)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            print(inspect(Path(args.path)))
            return 0
        config = resolve_config(args)
        if args.command == "run":
            print(run_experiment(config))
        elif args.command == "serve":
            print(run_experiment(replace(config, mode="multi-process"), spawn=False))
        elif args.command == "graph":
            print(run_graph_only(config))
        elif args.command == "compare":
            out, reports, _ = run_compare(config)
            for rep in reports:
                print(f"{rep.method:8s} {rep.mean:.4f} +/- {rep.std:.4f}")
            print(out)
        elif args.command == "client":
            if not config.connect:
                raise ConfigError("connect: client needs --connect host:port")
            prepared = prepare(config, config.seed)
            shards = {s.client_id: s for s in prepared.shards}
            if args.client_id not in shards:
                raise ConfigError(f"client-id: no shard {args.client_id} (clients={config.clients})")
            serve_client(make_client(prepared, shards[args.client_id]), config.connect)
        return 0
    except Exception as exc:
        if args.verbose:
            logging.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
