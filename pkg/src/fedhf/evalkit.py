"""Test-set scoring and the federated mean baseline."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datahub import ClientShard, CorruptionMask

logger = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


def client_mean_stats(shard: ClientShard) -> tuple[np.ndarray, np.ndarray]:
    """(sum, count) per feature over observed, available training cells."""
    obs = shard.train_mask.observation & shard.availability[None, :]
    return np.where(obs, shard.train.values, 0.0).sum(axis=0), obs.sum(axis=0)


def fed_mean_fit(stats: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Global per-feature mean from per-client (sum, count); 0 where nothing was observed."""
    total = sum(s for s, _ in stats)
    count = sum(c for _, c in stats)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def fed_mean_impute(means: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.where(np.isnan(values), means[None, :], values)


def evaluate(imputed: np.ndarray, corruption: CorruptionMask) -> float:
    """RMSE over the corrupted positions only."""
    got = imputed[corruption.rows, corruption.cols]
    if np.isnan(got).any():
        raise EvaluationError(f"{int(np.isnan(got).sum())} corrupted positions were left unimputed")
    if len(got) == 0:
        raise EvaluationError("empty corruption mask")
    return float(np.sqrt(np.mean((got - corruption.originals) ** 2)))


@dataclass
class EvalReport:
    method: str
    seeds: list[int]
    rmse: list[float]
    corruption: float
    errors: dict[int, str] = field(default_factory=dict)

    @property
    def ok(self) -> list[float]:
        return [r for r in self.rmse if not math.isnan(r)]

    @property
    def mean(self) -> float:
        return float(np.mean(self.ok)) if self.ok else float("nan")

    @property
    def std(self) -> float:
        vals = self.ok
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0 if vals else float("nan")

    def to_json(self) -> dict:
        return {"method": self.method, "seeds": self.seeds, "rmse": self.rmse, "mean": self.mean,
                "std": self.std, "corruption": self.corruption,
                "errors": {str(k): v for k, v in self.errors.items()}}


# A trial prepares one seed's shared data (shards, corruption) and maps a
# method name to its imputed test matrix.
Trial = Callable[[str], np.ndarray]


def compare(methods: Sequence[str], trials: Sequence[tuple[int, CorruptionMask, Trial]],
            corruption: float) -> list[EvalReport]:
    """Score every method on every seed's shared corruption mask.

    A failing method is recorded as NaN for that seed; the others proceed.
    """
    reports = {m: EvalReport(m, [], [], corruption) for m in methods}
    for seed, mask, run in trials:
        for method in methods:
            rep = reports[method]
            rep.seeds.append(seed)
            try:
                rep.rmse.append(evaluate(run(method), mask))
            except Exception as exc:
                logger.exception("method %s failed on seed %d", method, seed)
                rep.rmse.append(float("nan"))
                rep.errors[seed] = f"{type(exc).__name__}: {exc}"
    return [reports[m] for m in methods]


def comparison_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "seed", "rmse"])
    for rep in reports:
        for seed, r in zip(rep.seeds, rep.rmse):
            writer.writerow([rep.method, seed, repr(r)])
    return buf.getvalue()


def comparison_summary(reports: Sequence[EvalReport]) -> str:
    means = [r.mean for r in reports if not math.isnan(r.mean)]
    best = min(means) if means else None
    doc = []
    for rep in reports:
        entry = rep.to_json()
        entry["best"] = best is not None and rep.mean == best
        doc.append(entry)
    return json.dumps(doc, indent=2) + "\n"
