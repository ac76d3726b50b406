"""Tabular data handling: CSV ingestion, two-level masks, client partitioning,
standardization, test corruption and a synthetic factor-model generator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# Missing cells are stored as NaN; CSV parsing rejects literal nan/inf so the
# marker is never confused with data.
MISSING = np.nan
STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


@dataclass
class DataMatrix:
    values: np.ndarray
    feature_names: list[str]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            self.values = self.values.reshape(-1, len(self.feature_names))
        if self.values.shape[1] != len(self.feature_names):
            raise DataError(f"{self.values.shape[1]} columns but {len(self.feature_names)} feature names")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("feature names must be unique")
        if np.isinf(self.values).any():
            raise DataError("infinite values are not allowed")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def take(self, rows) -> "DataMatrix":
        return DataMatrix(self.values[np.asarray(rows, dtype=np.intp)], list(self.feature_names))


@dataclass
class MaskPair:
    availability: np.ndarray  # (F,) bool
    observation: np.ndarray  # (n, F) bool

    def check(self, values: np.ndarray | None = None) -> None:
        if (self.observation & ~self.availability[None, :]).any():
            raise DataError("observation set on a schema-unavailable feature")
        if values is not None and not np.isfinite(values[self.observation]).all():
            raise DataError("observed cell without a finite value")


def masks_for(values: np.ndarray, availability: np.ndarray | None = None) -> MaskPair:
    n, f = values.shape
    avail = np.ones(f, dtype=bool) if availability is None else np.asarray(availability, dtype=bool)
    return MaskPair(avail.copy(), ~np.isnan(values) & avail[None, :])


@dataclass
class Stats:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "Stats":
        return cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64))


@dataclass
class ClientShard:
    client_id: int
    train: DataMatrix
    train_mask: MaskPair
    val: DataMatrix
    val_mask: MaskPair
    stats: Stats
    train_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    val_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def availability(self) -> np.ndarray:
        return self.train_mask.availability

    @property
    def n_train(self) -> int:
        return self.train.n_rows


@dataclass
class CorruptionMask:
    rows: np.ndarray
    cols: np.ndarray
    originals: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)

    def apply(self, values: np.ndarray) -> np.ndarray:
        out = values.copy()
        out[self.rows, self.cols] = MISSING
        return out

    def restore(self, values: np.ndarray) -> np.ndarray:
        out = values.copy()
        out[self.rows, self.cols] = self.originals
        return out


# -- ingestion ----------------------------------------------------------------

def load_csv(path: str | Path, missing_token: str = "") -> DataMatrix:
    """Read a comma-separated file with a header row.

    Empty cells and cells equal to ``missing_token`` become missing.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} cells, found {len(row)}")
            parsed = []
            for col, cell in zip(header, row):
                cell = cell.strip()
                if cell == "" or cell == missing_token:
                    parsed.append(MISSING)
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{line_no}: column {col!r}: cannot parse {cell!r}") from None
                if not math.isfinite(value):
                    raise DataError(f"{path}:{line_no}: column {col!r}: non-finite value {cell!r}")
                parsed.append(value)
            rows.append(parsed)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return DataMatrix(values, header)


# -- standardization ----------------------------------------------------------

def fit_stats(values: np.ndarray, observation: np.ndarray,
              availability: np.ndarray | None = None) -> Stats:
    """Per-feature mean and population std over observed cells."""
    n_feat = values.shape[1]
    avail = observation.any(axis=0) if availability is None else availability
    mean = np.zeros(n_feat)
    std = np.ones(n_feat)
    for f in range(n_feat):
        col = values[observation[:, f], f]
        if len(col) < 2:
            if avail[f]:
                logger.warning("feature %d has %d observed training entries; using std=1", f, len(col))
            mean[f] = col[0] if len(col) else 0.0
            continue
        mean[f] = col.mean()
        std[f] = max(col.std(), STD_FLOOR)
    return Stats(mean, std)


def pooled_stats(parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> Stats:
    """Combine per-client (sum, sum of squares, count) into global stats."""
    s = sum(p[0] for p in parts)
    sq = sum(p[1] for p in parts)
    n = sum(p[2] for p in parts)
    safe = np.maximum(n, 1)
    mean = np.where(n > 0, s / safe, 0.0)
    var = np.where(n > 1, sq / safe - mean ** 2, 1.0)
    std = np.maximum(np.sqrt(np.maximum(var, 0.0)), STD_FLOOR)
    return Stats(mean, std)


def moment_sums(values: np.ndarray, observation: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    filled = np.where(observation, values, 0.0)
    return filled.sum(axis=0), (filled ** 2).sum(axis=0), observation.sum(axis=0)


def standardize(values: np.ndarray, observation: np.ndarray,
                stats: Stats | None = None) -> tuple[np.ndarray, Stats]:
    if stats is None:
        stats = fit_stats(values, observation)
    z = stats.transform(values)
    return np.where(np.isnan(values), MISSING, z), stats


# -- partitioning -------------------------------------------------------------

def split_rows(n_rows: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (kept, held_out) row split; held_out has floor(fraction*n) rows."""
    perm = rng.permutation(n_rows)
    n_out = int(math.floor(fraction * n_rows))
    return np.sort(perm[n_out:]), np.sort(perm[:n_out])


def n_kept_features(n_features: int, keep_fraction: float) -> int:
    # small epsilon absorbs binary representation error, e.g. 0.6 * 5
    return int(math.floor(keep_fraction * n_features + 1e-9))


def partition_clients(data: DataMatrix, k_clients: int, keep_fraction: float, seed: int,
                      val_fraction: float = 0.1, standardization: str | None = "client") -> list[ClientShard]:
    """Split rows round-robin over a seeded shuffle and give each client a
    random ``keep_fraction`` subset of the features.

    ``standardization`` is ``"client"`` (local train stats), ``"global"``
    (pooled train stats) or ``None`` (raw values, identity stats).
    """
    if k_clients < 1:
        raise DataError(f"k_clients must be >= 1, got {k_clients}")
    if not 0 < keep_fraction <= 1:
        raise DataError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n_feat = data.n_features
    n_keep = n_kept_features(n_feat, keep_fraction)
    if n_keep == 0:
        raise DataError(f"keep_fraction={keep_fraction} leaves no features out of {n_feat}")

    seqs = np.random.SeedSequence(seed).spawn(k_clients + 1)
    perm = np.random.default_rng(seqs[0]).permutation(data.n_rows)

    raw = []
    for k in range(k_clients):
        rng = np.random.default_rng(seqs[k + 1])
        rows = perm[k::k_clients]
        avail = np.zeros(n_feat, dtype=bool)
        avail[rng.choice(n_feat, size=n_keep, replace=False)] = True
        keep_local, val_local = split_rows(len(rows), val_fraction, rng)
        train_rows, val_rows = np.sort(rows[keep_local]), np.sort(rows[val_local])
        raw.append((k, avail, train_rows, val_rows))

    def masked(rows, avail):
        vals = data.values[rows].copy()
        vals[:, ~avail] = MISSING
        return vals, masks_for(vals, avail)

    prepared = []
    for k, avail, train_rows, val_rows in raw:
        tr, tr_mask = masked(train_rows, avail)
        va, va_mask = masked(val_rows, avail)
        prepared.append((k, avail, train_rows, val_rows, tr, tr_mask, va, va_mask))

    identity = Stats(np.zeros(n_feat), np.ones(n_feat))
    pooled = None
    if standardization == "global":
        pooled = pooled_stats([moment_sums(p[4], p[5].observation) for p in prepared])
    elif standardization not in ("client", None):
        raise DataError(f"unknown standardization mode {standardization!r}")

    shards = []
    for k, avail, train_rows, val_rows, tr, tr_mask, va, va_mask in prepared:
        if standardization is None:
            stats = identity
        else:
            stats = pooled if pooled is not None else fit_stats(tr, tr_mask.observation, avail)
            tr, _ = standardize(tr, tr_mask.observation, stats)
            va, _ = standardize(va, va_mask.observation, stats)
        shards.append(ClientShard(
            client_id=k,
            train=DataMatrix(tr, list(data.feature_names)), train_mask=tr_mask,
            val=DataMatrix(va, list(data.feature_names)), val_mask=va_mask,
            stats=stats, train_rows=train_rows, val_rows=val_rows))
    return shards


# -- corruption ---------------------------------------------------------------

def make_test_corruption(values: np.ndarray, mask: MaskPair, proportion: float,
                         seed: int) -> CorruptionMask:
    """Hide floor(proportion * eligible) observed, available cells at random."""
    if not 0 < proportion < 1:
        raise DataError(f"corruption proportion must be in (0, 1), got {proportion}")
    eligible = np.flatnonzero(mask.observation & mask.availability[None, :])
    count = int(math.floor(proportion * len(eligible)))
    if count == 0:
        raise DataError(f"no cells to corrupt: {len(eligible)} eligible, proportion {proportion}")
    chosen = np.sort(np.random.default_rng(seed).choice(eligible, size=count, replace=False))
    rows, cols = np.unravel_index(chosen, values.shape)
    return CorruptionMask(rows.astype(np.intp), cols.astype(np.intp), values[rows, cols].copy())


# -- synthetic data -----------------------------------------------------------

def synth_gaussian(n_rows: int, n_features: int, n_factors: int, noise_std: float, seed: int,
                   loading_scale: float = 1.0,
                   loadings: np.ndarray | None = None) -> tuple[DataMatrix, np.ndarray]:
    """Zero-mean Gaussian rows with covariance L L^T + noise_std^2 I.

    Loadings are standard normal times ``loading_scale`` unless given.
    """
    if not 0 <= n_factors < n_features:
        raise DataError(f"need 0 <= n_factors < n_features, got {n_factors} and {n_features}")
    if noise_std < 0 or n_rows < 0:
        raise DataError("noise_std and n_rows must be non-negative")
    rng = np.random.default_rng(seed)
    if loadings is None:
        loadings = loading_scale * rng.standard_normal((n_features, n_factors))
    loadings = np.asarray(loadings, dtype=np.float64).reshape(n_features, n_factors)
    cov = loadings @ loadings.T + noise_std ** 2 * np.eye(n_features)
    factors = rng.standard_normal((n_rows, n_factors))
    noise = noise_std * rng.standard_normal((n_rows, n_features))
    values = factors @ loadings.T + noise
    names = [f"x{i}" for i in range(n_features)]
    return DataMatrix(values, names), cov


def oracle_conditional_mean(cov: np.ndarray, row: np.ndarray,
                            mean: np.ndarray | None = None) -> np.ndarray:
    """Fill missing cells of ``row`` with their Gaussian conditional mean."""
    row = np.asarray(row, dtype=np.float64)
    mu = np.zeros(len(row)) if mean is None else np.asarray(mean, dtype=np.float64)
    miss = np.isnan(row)
    out = row.copy()
    if not miss.any():
        return out
    obs = ~miss
    if not obs.any():
        out[miss] = mu[miss]
        return out
    s_oo = cov[np.ix_(obs, obs)]
    s_mo = cov[np.ix_(miss, obs)]
    try:
        if np.linalg.cond(s_oo) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        coef = np.linalg.solve(s_oo, row[obs] - mu[obs])
    except np.linalg.LinAlgError:
        logger.warning("singular observed covariance block; adding 1e-8 ridge")
        coef = np.linalg.solve(s_oo + 1e-8 * np.eye(obs.sum()), row[obs] - mu[obs])
    out[miss] = mu[miss] + s_mo @ coef
    return out


def oracle_impute(cov: np.ndarray, values: np.ndarray, mean: np.ndarray | None = None) -> np.ndarray:
    return np.vstack([oracle_conditional_mean(cov, r, mean) for r in values]) if len(values) else values.copy()
