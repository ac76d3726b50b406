"""Client-side self-supervised training with block masking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .datahub import ClientShard
from .featgraph import FeatureGraph
from .imputer import BatchInput, ModelParams, forward, predict

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 1
    batch_size: int = 64
    rho: float = 0.2
    lr: float = 1e-3
    rho_val: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if self.rho_val is not None and not 0 < self.rho_val < 1:
            raise ValueError(f"rho_val must be in (0, 1), got {self.rho_val}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")


@dataclass
class BlockCorruption:
    features: np.ndarray
    omega: np.ndarray  # B x F bool
    batch: BatchInput  # corrupted x', m'
    targets: np.ndarray  # uncorrupted x


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    n_batches: int
    n_skipped: int


@dataclass
class TrainResult:
    params: ModelParams
    n_samples: int
    epochs: list[EpochLog] = field(default_factory=list)
    n_steps: int = 0


def block_size(n_avail: int, rho: float) -> int:
    return max(1, int(math.floor(rho * n_avail)))


def sample_block(available: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset of the available feature ids, sorted."""
    avail = np.asarray(available)
    if avail.dtype == bool:
        avail = np.flatnonzero(avail)
    if len(avail) < 2:
        raise TrainingError(f"block masking needs >= 2 available features, got {len(avail)}")
    return np.sort(rng.choice(avail, size=block_size(len(avail), rho), replace=False))


def corrupt_batch(batch: BatchInput, features: np.ndarray) -> BlockCorruption:
    in_block = np.zeros(batch.x.shape[1], dtype=bool)
    in_block[features] = True
    omega = (batch.m > 0) & (batch.a > 0)[None, :] & in_block[None, :]
    x = np.where(omega, 0.0, batch.x)
    m = np.where(omega, 0.0, batch.m)
    return BlockCorruption(np.asarray(features), omega, BatchInput(x, m, batch.a.copy()), batch.x)


def masked_loss(pred: np.ndarray, target: np.ndarray, omega: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over ``omega`` and its gradient w.r.t. ``pred``."""
    count = int(omega.sum())
    if count == 0:
        raise TrainingError("masked_loss needs a non-empty corruption set")
    diff = np.where(omega, pred - target, 0.0)
    return float((diff ** 2).sum() / count), 2.0 * diff / count


def train_step(params: ModelParams, graph: FeatureGraph, corruption: BlockCorruption) -> tuple[float, dict]:
    tape = nk.Tape()
    out = forward(params, graph, corruption.batch, tape)
    pred = out.value.reshape(corruption.targets.shape)
    loss, seed = masked_loss(pred, corruption.targets, corruption.omega)
    return loss, tape.backward(seed.reshape(-1, 1))


def local_train(params: ModelParams, shard: ClientShard, graph: FeatureGraph, config: TrainConfig,
                rng: np.random.Generator) -> TrainResult:
    """Run ``config.local_epochs`` epochs on a private copy of ``params``."""
    avail = shard.availability
    eligible = shard.train_mask.observation & avail[None, :]
    if not eligible.any():
        raise TrainingError(f"client {shard.client_id} has no observed, available training cells")
    params = params.copy()
    named = params.named()
    opt = nk.Adam(lr=config.lr)
    n = shard.n_train
    logs = []
    for epoch in range(config.local_epochs):
        order = rng.permutation(n)
        losses, skipped = [], 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = BatchInput.from_values(shard.train.values[idx], shard.train_mask.observation[idx], avail)
            corruption = corrupt_batch(batch, sample_block(avail, config.rho, rng))
            if not corruption.omega.any():
                skipped += 1
                logger.debug("client %d: empty corruption set, batch skipped", shard.client_id)
                continue
            loss, grads = train_step(params, graph, corruption)
            opt.step(named, grads)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        logs.append(EpochLog(epoch, mean_loss, len(losses), skipped))
    return TrainResult(params, n, logs, opt.step_count)


def validation_mask(shard: ClientShard, rho: float, seed: int) -> np.ndarray:
    """Fixed block corruption set over the whole validation split."""
    features = sample_block(shard.availability, rho, np.random.default_rng(seed))
    in_block = np.zeros(shard.val.n_features, dtype=bool)
    in_block[features] = True
    return shard.val_mask.observation & shard.availability[None, :] & in_block[None, :]


def validation_rmse(params: ModelParams, shard: ClientShard, graph: FeatureGraph, seed: int,
                    rho: float = 0.2) -> float:
    if shard.val.n_rows == 0:
        raise TrainingError(f"client {shard.client_id} has an empty validation split")
    omega = validation_mask(shard, rho, seed)
    if not omega.any():
        raise TrainingError(f"client {shard.client_id}: validation corruption set is empty")
    batch = BatchInput.from_values(shard.val.values, shard.val_mask.observation, shard.availability)
    corrupted = corrupt_batch(batch, np.flatnonzero(omega.any(axis=0)))
    xhat = predict(params, graph, corrupted.batch)
    err = (xhat - batch.x)[omega]
    return float(np.sqrt(np.mean(err ** 2)))
