"""Feature-node GNN imputer.

Every (sample, feature) cell is a node state. States start from an input MLP
over ``[embedding | value | observed | available]``, exchange weighted
messages along the feature graph for ``n_layers`` residual steps, and a
scalar head maps each final state to a prediction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numkit as nk
from .featgraph import FeatureGraph

N_SCALAR_INPUTS = 3  # value, observation flag, availability flag


@dataclass(frozen=True)
class ImputerConfig:
    n_features: int
    embed_dim: int = 16
    n_layers: int = 2
    hidden: int = 64

    def __post_init__(self) -> None:
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")


@dataclass
class ModelParams:
    embeddings: np.ndarray
    mlp_in: nk.MlpParams
    layers: list[nk.MlpParams]
    mlp_out: nk.MlpParams

    @property
    def n_features(self) -> int:
        return self.embeddings.shape[0]

    def named(self) -> dict[str, np.ndarray]:
        """Live references to every tensor, in serialization order."""
        out = {"embeddings": self.embeddings}
        out.update(self.mlp_in.named())
        for mlp in self.layers:
            out.update(mlp.named())
        out.update(self.mlp_out.named())
        return out

    def copy(self) -> "ModelParams":
        return self.with_values({k: v.copy() for k, v in self.named().items()})

    def with_values(self, values: dict[str, np.ndarray]) -> "ModelParams":
        """Same structure, tensors taken from ``values``."""
        def rebuild(mlp: nk.MlpParams) -> nk.MlpParams:
            return nk.MlpParams(mlp.name, [
                nk.Layer(values[f"{mlp.name}.{i}.weight"], values[f"{mlp.name}.{i}.bias"], layer.nonlinear)
                for i, layer in enumerate(mlp.layers)])
        return ModelParams(values["embeddings"], rebuild(self.mlp_in),
                           [rebuild(m) for m in self.layers], rebuild(self.mlp_out))

    def to_bytes(self) -> bytes:
        return nk.serialize_params(self.named())

    def from_bytes(self, data: bytes) -> "ModelParams":
        values = nk.deserialize_params(data)
        mine = self.named()
        if list(values) != list(mine):
            raise nk.SerializationError("parameter names do not match the model structure")
        for name, arr in values.items():
            if arr.shape != mine[name].shape:
                raise nk.SerializationError(f"{name}: shape {arr.shape} != expected {mine[name].shape}")
        return self.with_values(values)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def init_params(config: ImputerConfig, rng: np.random.Generator) -> ModelParams:
    d, h = config.embed_dim, config.hidden
    emb = rng.normal(0.0, 1.0 / np.sqrt(d), size=(config.n_features, d))
    mlp_in = nk.init_mlp("mlp_in", [d + N_SCALAR_INPUTS, h, d], rng)
    layers = [nk.init_mlp(f"mp{l}", [2 * d, h, d], rng) for l in range(config.n_layers)]
    mlp_out = nk.init_mlp("mlp_out", [d, h, 1], rng)
    return ModelParams(emb, mlp_in, layers, mlp_out)


@dataclass
class BatchInput:
    x: np.ndarray  # B x F, missing -> 0
    m: np.ndarray  # B x F in {0, 1}
    a: np.ndarray  # F in {0, 1}

    @classmethod
    def from_values(cls, values: np.ndarray, observation: np.ndarray, availability: np.ndarray) -> "BatchInput":
        obs = np.asarray(observation, dtype=bool) & np.asarray(availability, dtype=bool)[None, :]
        x = np.where(obs, np.nan_to_num(values, nan=0.0), 0.0)
        return cls(x, obs.astype(np.float64), np.asarray(availability, dtype=np.float64))


def _check(params: ModelParams, batch: BatchInput) -> None:
    F = params.n_features
    if batch.x.shape[1] != F or batch.m.shape != batch.x.shape or batch.a.shape != (F,):
        raise nk.ShapeError(
            f"batch shapes x={batch.x.shape} m={batch.m.shape} a={batch.a.shape} do not match F={F}")


def encode(params: ModelParams, batch: BatchInput, tape: nk.Tape) -> nk.Node:
    """Initial node states, (B*F) x d, block-major by sample."""
    _check(params, batch)
    B, F = batch.x.shape
    emb = tape.param("embeddings", params.embeddings)
    e_rows = nk.gather_rows(emb, np.tile(np.arange(F), B))
    scalars = tape.const(np.column_stack([batch.x.ravel(), batch.m.ravel(), np.tile(batch.a, B)]))
    return nk.mlp_forward(params.mlp_in, nk.concat([e_rows, scalars]), tape)


def aggregate(h: nk.Node, graph: FeatureGraph, n_samples: int) -> nk.Node:
    return nk.edge_scatter(h, graph.src, graph.dst, graph.weight, n_samples, graph.n_nodes)


def message_pass(mlp: nk.MlpParams, graph: FeatureGraph, h: nk.Node, n_samples: int) -> nk.Node:
    msg = aggregate(h, graph, n_samples)
    return nk.add(h, nk.mlp_forward(mlp, nk.concat([h, msg])))


def forward(params: ModelParams, graph: FeatureGraph, batch: BatchInput, tape: nk.Tape) -> nk.Node:
    """Full network; returns a (B*F) x 1 node."""
    if graph.n_nodes != params.n_features:
        raise nk.ShapeError(f"graph has {graph.n_nodes} nodes, model has {params.n_features} features")
    B = batch.x.shape[0]
    h = encode(params, batch, tape)
    for mlp in params.layers:
        h = message_pass(mlp, graph, h, B)
    return nk.mlp_forward(params.mlp_out, h)


def predict(params: ModelParams, graph: FeatureGraph, batch: BatchInput) -> np.ndarray:
    out = forward(params, graph, batch, nk.Tape())
    return out.value.reshape(batch.x.shape)


def impute(params: ModelParams, graph: FeatureGraph, values: np.ndarray, observation: np.ndarray,
           availability: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Keep observed cells, fill missing-but-available ones, leave the rest missing."""
    obs = np.asarray(observation, dtype=bool)
    avail = np.asarray(availability, dtype=bool)
    out = np.array(values, dtype=np.float64, copy=True)
    fill = ~obs & avail[None, :]
    out[:, ~avail] = np.nan
    rows = np.flatnonzero(fill.any(axis=1))
    for start in range(0, len(rows), batch_size):
        idx = rows[start:start + batch_size]
        xhat = predict(params, graph, BatchInput.from_values(values[idx], obs[idx], avail))
        block = out[idx]
        block[fill[idx]] = xhat[fill[idx]]
        out[idx] = block
    return out


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(params: ModelParams, config: ImputerConfig, graph: FeatureGraph, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(params.to_bytes())
    sidecar = {"imputer": asdict(config), "graph_sha256": graph.sha256()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path, graph: FeatureGraph) -> tuple[ModelParams, ImputerConfig]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    if sidecar["graph_sha256"] != graph.sha256():
        raise ValueError(f"{path}: checkpoint was trained on a different feature graph")
    config = ImputerConfig(**sidecar["imputer"])
    template = init_params(config, np.random.default_rng(0))
    return template.from_bytes(path.read_bytes()), config
