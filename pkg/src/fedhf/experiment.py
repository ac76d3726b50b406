"""End-to-end pipeline: data -> partition -> graph -> federation -> evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import datahub as dh
from .evalkit import EvalReport, client_mean_stats, compare, comparison_csv, comparison_summary, \
    evaluate, fed_mean_fit, fed_mean_impute
from .featgraph import FeatureGraph, build_graph, compute_local_correlations, merge_reports, save_graph
from .federation import (ClientNode, FederationConfig, FederationResult, InProcessTransport,
                         TcpServerTransport, Transport, establish_graph, run_federation)
from .imputer import ImputerConfig, ModelParams, impute, init_params, save_checkpoint
from .seeding import derive_seed
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

METHODS = ("fedhf", "fedmean", "oracle")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str | None = None
    missing_token: str = ""
    synthetic: str | None = None
    clients: int = 4
    keep: float = 0.6
    graph_k: int = 5
    min_support: int = 10
    embed_dim: int = 16
    layers: int = 2
    hidden: int = 64
    rho: float = 0.2
    rho_val: float | None = None
    batch: int = 64
    epochs: int = 1
    lr: float = 1e-3
    rounds: int = 60
    patience: int | None = 15
    participation: int | None = None
    corrupt: float = 0.2
    seeds: int = 5
    seed: int = 0
    mode: str = "in-process"
    listen: str = "127.0.0.1:0"
    connect: str | None = None
    out: str = "runs"
    standardize: str = "client"
    val_fraction: float = 0.1
    test_fraction: float = 0.15
    workers: int = 1
    methods: str = "fedhf,fedmean,oracle"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def method_list(self) -> list[str]:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    def validate(self) -> "ExperimentConfig":
        def need(ok: bool, name: str, why: str) -> None:
            if not ok:
                raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        need((self.dataset is None) != (self.synthetic is None), "dataset",
             "exactly one of dataset / synthetic must be set")
        need(self.clients >= 1, "clients", "must be >= 1")
        need(0 < self.keep <= 1, "keep", "must be in (0, 1]")
        need(self.graph_k >= 1, "graph_k", "must be >= 1")
        need(self.min_support >= 2, "min_support", "must be >= 2")
        need(self.embed_dim >= 1, "embed_dim", "must be >= 1")
        need(self.layers >= 1, "layers", "must be >= 1")
        need(self.hidden >= 1, "hidden", "must be >= 1")
        need(0 < self.rho < 1, "rho", "must be in (0, 1)")
        need(self.rho_val is None or 0 < self.rho_val < 1, "rho_val", "must be in (0, 1)")
        need(self.batch >= 1, "batch", "must be >= 1")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.lr >= 0, "lr", "must be >= 0")
        need(self.rounds >= 1, "rounds", "must be >= 1")
        need(self.patience is None or self.patience >= 1, "patience", "must be >= 1")
        need(self.participation is None or 1 <= self.participation <= self.clients, "participation",
             "must be between 1 and clients")
        need(0 < self.corrupt < 1, "corrupt", "must be in (0, 1)")
        need(self.seeds >= 1, "seeds", "must be >= 1")
        need(self.mode in ("in-process", "multi-process"), "mode", "must be in-process or multi-process")
        need(self.standardize in ("client", "global"), "standardize", "must be client or global")
        need(0 <= self.val_fraction < 1, "val_fraction", "must be in [0, 1)")
        need(0 < self.test_fraction < 1, "test_fraction", "must be in (0, 1)")
        need(self.workers >= 1, "workers", "must be >= 1")
        bad = [m for m in self.method_list() if m not in METHODS]
        need(not bad and bool(self.method_list()), "methods", f"choose from {', '.join(METHODS)}")
        if self.synthetic is not None:
            parse_synthetic(self.synthetic)
        return self

    def imputer(self, n_features: int) -> ImputerConfig:
        return ImputerConfig(n_features, self.embed_dim, self.layers, self.hidden)

    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch, self.rho, self.lr, self.rho_val)

    def federation(self, seed: int) -> FederationConfig:
        return FederationConfig(self.rounds, self.participation, self.patience,
                                derive_seed(seed, "participation"), self.workers)


SYNTH_KEYS = {"f": ("n_features", int), "factors": ("n_factors", int), "noise": ("noise_std", float),
              "n": ("n_rows", int), "scale": ("loading_scale", float), "missing": ("missing", float)}


def parse_synthetic(text: str) -> dict:
    """``"f=20,factors=3,noise=0.5,n=2000,scale=1,missing=0"`` -> kwargs."""
    out = {"n_features": 20, "n_factors": 3, "noise_std": 0.5, "n_rows": 2000,
           "loading_scale": 1.0, "missing": 0.0}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        if not sep or key not in SYNTH_KEYS:
            raise ConfigError(f"synthetic: bad item {part!r}; keys are {', '.join(SYNTH_KEYS)}")
        name, typ = SYNTH_KEYS[key]
        try:
            out[name] = typ(value)
        except ValueError:
            raise ConfigError(f"synthetic: {key} expects {typ.__name__}, got {value!r}") from None
    if not 0 <= out["missing"] < 1:
        raise ConfigError("synthetic: missing must be in [0, 1)")
    if not 0 <= out["n_factors"] < out["n_features"]:
        raise ConfigError("synthetic: need 0 <= factors < f")
    return out


# -- preparation -------------------------------------------------------------------

@dataclass
class Prepared:
    config: ExperimentConfig
    seed: int
    feature_names: list[str]
    cov: np.ndarray | None
    shards: list[dh.ClientShard]
    test_raw: np.ndarray
    test_stats: dh.Stats
    test_z: np.ndarray
    corruption: dh.CorruptionMask
    manifest: dict

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def corrupted_z(self) -> np.ndarray:
        return self.corruption.apply(self.test_z)

    def manifest_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest, sort_keys=True).encode()).hexdigest()


def load_data(config: ExperimentConfig, seed: int) -> tuple[dh.DataMatrix, np.ndarray | None]:
    if config.dataset is not None:
        return dh.load_csv(config.dataset, config.missing_token), None
    kwargs = parse_synthetic(config.synthetic)
    missing = kwargs.pop("missing")
    data, cov = dh.synth_gaussian(seed=derive_seed(seed, "data"), **kwargs)
    if missing > 0:
        rng = np.random.default_rng(derive_seed(seed, "mcar"))
        values = data.values.copy()
        values[rng.random(values.shape) < missing] = dh.MISSING
        data = dh.DataMatrix(values, data.feature_names)
    return data, cov


def prepare(config: ExperimentConfig, seed: int) -> Prepared:
    data, cov = load_data(config, seed)
    rest, test_rows = dh.split_rows(data.n_rows, config.test_fraction,
                                    np.random.default_rng(derive_seed(seed, "test-split")))
    pool = data.take(rest)
    shards = dh.partition_clients(pool, config.clients, config.keep, derive_seed(seed, "partition"),
                                  config.val_fraction, config.standardize)
    for shard in shards:
        shard.train_rows = rest[shard.train_rows]
        shard.val_rows = rest[shard.val_rows]
    raw_train = [(data.values[s.train_rows], s.train_mask) for s in shards]
    test_stats = dh.pooled_stats([dh.moment_sums(np.where(m.observation, v, 0.0), m.observation)
                                  for v, m in raw_train])
    test_raw = data.values[test_rows]
    test_mask = dh.masks_for(test_raw)
    test_z, _ = dh.standardize(test_raw, test_mask.observation, test_stats)
    corruption = dh.make_test_corruption(test_z, test_mask, config.corrupt, derive_seed(seed, "corruption"))
    manifest = {
        "seed": seed,
        "feature_names": list(data.feature_names),
        "n_rows": data.n_rows,
        "test_rows": test_rows.tolist(),
        "test_stats": test_stats.to_json(),
        "corruption_positions": len(corruption),
        "clients": [{
            "client_id": s.client_id,
            "availability": s.availability.astype(int).tolist(),
            "n_available": int(s.availability.sum()),
            "train_rows": s.train_rows.tolist(),
            "val_rows": s.val_rows.tolist(),
            "stats": s.stats.to_json(),
        } for s in shards],
    }
    return Prepared(config, seed, list(data.feature_names), cov, shards, test_raw, test_stats,
                    test_z, corruption, manifest)


def make_client(prepared: Prepared, shard: dh.ClientShard) -> ClientNode:
    cfg = prepared.config
    return ClientNode(shard, cfg.imputer(prepared.n_features), cfg.train(),
                      train_seed=derive_seed(prepared.seed, f"client{shard.client_id}"),
                      val_seed=derive_seed(prepared.seed, "validation") ^ shard.client_id,
                      min_support=cfg.min_support, manifest_hash=prepared.manifest_hash())


def build_global_graph(prepared: Prepared) -> FeatureGraph:
    """Graph construction without a transport (same reports, same merge)."""
    reports = [compute_local_correlations(s.train.values, s.train_mask.observation, s.availability,
                                          s.client_id, prepared.config.min_support)
               for s in prepared.shards]
    return build_graph(merge_reports(reports), prepared.n_features, prepared.config.graph_k,
                       prepared.feature_names)


def initial_params(prepared: Prepared) -> ModelParams:
    return init_params(prepared.config.imputer(prepared.n_features),
                       np.random.default_rng(derive_seed(prepared.seed, "init")))


@dataclass
class FedRun:
    graph: FeatureGraph
    result: FederationResult
    transport: Transport


def spawn_clients(config_path: Path, seed: int, address: str, n_clients: int) -> list[subprocess.Popen]:
    procs = []
    for k in range(n_clients):
        cmd = [sys.executable, "-m", "fedhf", "client", "--config", str(config_path),
               "--seed", str(seed), "--client-id", str(k), "--connect", address]
        procs.append(subprocess.Popen(cmd))
    return procs


def run_fedhf(prepared: Prepared, transport: Transport | None = None) -> FedRun:
    if transport is None:
        transport = InProcessTransport([make_client(prepared, s) for s in prepared.shards],
                                       prepared.config.workers)
    graph, _ = establish_graph(transport, prepared.n_features, prepared.config.graph_k,
                               prepared.feature_names)
    result = run_federation(prepared.config.federation(prepared.seed), transport,
                            initial_params(prepared), graph)
    return FedRun(graph, result, transport)


def impute_test(prepared: Prepared, method: str, fed: FedRun | None = None) -> np.ndarray:
    corrupted = prepared.corrupted_z
    if method == "fedhf":
        if fed is None:
            fed = run_fedhf(prepared)
        avail = np.ones(prepared.n_features, dtype=bool)
        return impute(fed.result.best, fed.graph, corrupted, ~np.isnan(corrupted), avail)
    if method == "fedmean":
        means = fed_mean_fit([client_mean_stats(s) for s in prepared.shards])
        return fed_mean_impute(means, corrupted)
    if method == "oracle":
        if prepared.cov is None:
            raise ConfigError("the oracle method needs synthetic data with a known covariance")
        raw = prepared.corruption.apply(prepared.test_raw)
        return prepared.test_stats.transform(dh.oracle_impute(prepared.cov, raw))
    raise ConfigError(f"unknown method {method!r}")


# -- artifacts ------------------------------------------------------------------------

def history_csv(result: FederationResult, client_ids: list[int]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "aggregate_val_rmse"] + [f"client_{c}_rmse" for c in client_ids])
    for rec in result.history:
        writer.writerow([rec.round, repr(rec.aggregate_rmse)]
                        + [repr(rec.val_rmse[c]) if c in rec.val_rmse else "" for c in client_ids])
    return buf.getvalue()


def jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def write_fed_artifacts(out: Path, prepared: Prepared, fed: FedRun) -> None:
    res = fed.result
    cfg = prepared.config
    ids = [s.client_id for s in prepared.shards]
    (out / "history.csv").write_text(history_csv(res, ids))
    (out / "rounds.jsonl").write_text(jsonl(r.to_json() for r in res.history))
    (out / "train_log.jsonl").write_text(jsonl(
        {"round": r.round, "client": c, **e} for r in res.history for c in sorted(r.train_logs)
        for e in r.train_logs[c]))
    (out / "transport_log.jsonl").write_text(jsonl(fed.transport.log))
    imp = cfg.imputer(prepared.n_features)
    save_checkpoint(res.best, imp, fed.graph, out / "best.fhf")
    save_checkpoint(res.final, imp, fed.graph, out / "final.fhf")


def run_dir(config: ExperimentConfig, name: str) -> Path:
    out = Path(config.out) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_experiment(config: ExperimentConfig, spawn: bool = True) -> Path:
    """Full pipeline for ``config.seed``; returns the artifact directory."""
    config.validate()
    seed = config.seed
    out = run_dir(config, f"seed-{seed}")
    (out / "FAILED").unlink(missing_ok=True)
    try:
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        prepared = prepare(config, seed)
        (out / "manifest.json").write_text(json.dumps(prepared.manifest, indent=1, sort_keys=True) + "\n")
        transport = None
        procs = []
        if config.mode == "multi-process":
            transport = TcpServerTransport(config.listen, config.clients, prepared.manifest_hash())
            if spawn:
                procs = spawn_clients(out / "config.json", seed, transport.address, config.clients)
            else:
                print(f"listening on {transport.address}", flush=True)
        try:
            fed = run_fedhf(prepared, transport)
        finally:
            if transport is not None:
                transport.close()
            for p in procs:
                if p.wait(timeout=120) != 0:
                    raise RuntimeError(f"client process exited with status {p.returncode}")
        save_graph(fed.graph, out / "graph.json")
        write_fed_artifacts(out, prepared, fed)
        scores = {}
        for method in config.method_list():
            if method == "oracle" and prepared.cov is None:
                continue
            scores[method] = evaluate(impute_test(prepared, method, fed), prepared.corruption)
        report = {
            "seed": seed,
            "test_rmse": scores,
            "best_round": fed.result.best_round,
            "best_val_rmse": fed.result.best_rmse,
            "rounds_run": len(fed.result.history),
            "stopped_early": fed.result.stopped_early,
            "corruption_positions": len(prepared.corruption),
        }
        (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    except BaseException as exc:
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    return out


def run_graph_only(config: ExperimentConfig) -> Path:
    config.validate()
    out = run_dir(config, f"seed-{config.seed}")
    prepared = prepare(config, config.seed)
    path = out / "graph.json"
    save_graph(build_global_graph(prepared), path)
    return path


def run_compare(config: ExperimentConfig) -> tuple[Path, list[EvalReport], dict[int, FedRun]]:
    """Every method on ``config.seeds`` derived seeds with shared masks per seed."""
    config.validate()
    out = run_dir(config, f"compare-seed-{config.seed}")
    methods = config.method_list()
    cache: dict[int, tuple[Prepared, FedRun | None]] = {}

    def trial(seed: int):
        prepared = prepare(config, seed)
        cache[seed] = (prepared, None)

        def run(method: str) -> np.ndarray:
            prep, fed = cache[seed]
            if method == "fedhf" and fed is None:
                fed = run_fedhf(prep)
                cache[seed] = (prep, fed)
                sub = out / f"seed-{seed}"
                sub.mkdir(exist_ok=True)
                (sub / "history.csv").write_text(history_csv(fed.result, [s.client_id for s in prep.shards]))
            return impute_test(prep, method, fed)
        return seed, prepared.corruption, run

    seeds = [derive_seed(config.seed, f"eval{i}") for i in range(config.seeds)]
    trials = (trial(s) for s in seeds)
    reports = compare(methods, trials, config.corrupt)
    (out / "comparison.csv").write_text(comparison_csv(reports))
    (out / "comparison.json").write_text(comparison_summary(reports))
    feds = {seed: fed for seed, (_, fed) in cache.items() if fed is not None}
    return out, reports, feds
