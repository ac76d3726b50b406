"""Global feature graph built from per-client Pearson correlation reports."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_MIN_SUPPORT = 10
DEFAULT_K = 5


class GraphFormatError(ValueError):
    pass


@dataclass
class ClientFeatureReport:
    client_id: int
    available: list[int]
    # (i, j) with i < j -> (r_ij, n_ij)
    pairs: dict[tuple[int, int], tuple[float, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "client_id": self.client_id,
            "available": list(self.available),
            "pairs": [[i, j, r, n] for (i, j), (r, n) in sorted(self.pairs.items())],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ClientFeatureReport":
        pairs = {(int(i), int(j)): (float(r), int(n)) for i, j, r, n in doc["pairs"]}
        return cls(int(doc["client_id"]), [int(f) for f in doc["available"]], pairs)


@dataclass
class FeatureGraph:
    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    feature_names: list[str] | None = None
    k: int | None = None

    def __post_init__(self) -> None:
        self.src = np.asarray(self.src, dtype=np.intp).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.intp).reshape(-1)
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        if not len(self.src) == len(self.dst) == len(self.weight):
            raise GraphFormatError("edge arrays differ in length")
        if len(self.src):
            if min(self.src.min(), self.dst.min()) < 0 or max(self.src.max(), self.dst.max()) >= self.n_nodes:
                raise GraphFormatError("edge endpoint outside node range")
            if (self.src == self.dst).any():
                raise GraphFormatError("self-loops are not allowed")
            if len(set(zip(self.src.tolist(), self.dst.tolist()))) != len(self.src):
                raise GraphFormatError("duplicate edges")
            if not ((self.weight >= 0) & (self.weight <= 1)).all():
                raise GraphFormatError("edge weights must lie in [0, 1]")

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)

    def dense(self) -> np.ndarray:
        """W with W[i, j] = w_ji."""
        w = np.zeros((self.n_nodes, self.n_nodes))
        w[self.dst, self.src] = self.weight
        return w

    def to_json(self) -> dict:
        order = np.lexsort((self.src, self.dst))
        return {
            "n_nodes": self.n_nodes,
            "feature_names": self.feature_names,
            "k": self.k,
            "edges": [[int(self.src[e]), int(self.dst[e]), float(self.weight[e])] for e in order],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json()) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def from_json(cls, doc) -> "FeatureGraph":
        if not isinstance(doc, dict):
            raise GraphFormatError("graph document must be a JSON object")
        try:
            n = doc["n_nodes"]
            edges = doc["edges"]
        except KeyError as exc:
            raise GraphFormatError(f"missing key {exc.args[0]!r}") from None
        if not isinstance(n, int) or n < 0:
            raise GraphFormatError(f"n_nodes must be a non-negative integer, got {n!r}")
        names = doc.get("feature_names")
        if names is not None and len(names) != n:
            raise GraphFormatError(f"{len(names)} feature names for {n} nodes")
        src, dst, w = [], [], []
        for pos, edge in enumerate(edges):
            if (not isinstance(edge, list) or len(edge) != 3
                    or not all(isinstance(v, int) for v in edge[:2])
                    or not isinstance(edge[2], (int, float))):
                raise GraphFormatError(f"edge {pos}: expected [src, dst, weight], got {edge!r}")
            if not 0 <= edge[2] <= 1:
                raise GraphFormatError(f"edge {pos}: weight {edge[2]!r} outside [0, 1]")
            src.append(edge[0])
            dst.append(edge[1])
            w.append(float(edge[2]))
        try:
            return cls(n, src, dst, w, feature_names=names, k=doc.get("k"))
        except GraphFormatError as exc:
            raise GraphFormatError(f"invalid graph: {exc}") from None

    @classmethod
    def loads(cls, text: str) -> "FeatureGraph":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"line {exc.lineno}, column {exc.colno} (offset {exc.pos}): {exc.msg}") from None
        return cls.from_json(doc)


def save_graph(graph: FeatureGraph, path: str | Path) -> None:
    Path(path).write_text(graph.dumps(), encoding="utf-8")


def load_graph(path: str | Path) -> FeatureGraph:
    return FeatureGraph.loads(Path(path).read_text(encoding="utf-8"))


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        return None
    return float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))


def compute_local_correlations(values: np.ndarray, observation: np.ndarray, availability: np.ndarray,
                               client_id: int = 0,
                               min_support: int = DEFAULT_MIN_SUPPORT) -> ClientFeatureReport:
    """Pearson r for each available feature pair over rows observing both."""
    avail = [int(f) for f in np.flatnonzero(availability)]
    pairs = {}
    for a_pos, i in enumerate(avail):
        for j in avail[a_pos + 1:]:
            both = observation[:, i] & observation[:, j]
            n = int(both.sum())
            if n < max(min_support, 2):
                continue
            r = pearson(values[both, i], values[both, j])
            if r is not None:
                pairs[(i, j)] = (r, n)
    return ClientFeatureReport(client_id, avail, pairs)


def merge_reports(reports: list[ClientFeatureReport]) -> dict[tuple[int, int], float]:
    """Count-weighted mean of |r| per pair, keyed by (i, j) with i < j."""
    num: dict[tuple[int, int], float] = {}
    den: dict[tuple[int, int], int] = {}
    for rep in reports:
        for pair, (r, n) in rep.pairs.items():
            key = (min(pair), max(pair))
            num[key] = num.get(key, 0.0) + n * abs(r)
            den[key] = den.get(key, 0) + n
    if not num:
        logger.warning("no correlated pairs reported; the feature graph will be empty")
    return {key: num[key] / den[key] for key in sorted(num)}


def pair_strength(merged: dict[tuple[int, int], float], i: int, j: int) -> float | None:
    return merged.get((min(i, j), max(i, j)))


def build_graph(merged: dict[tuple[int, int], float], n_nodes: int, k: int = DEFAULT_K,
                feature_names: list[str] | None = None) -> FeatureGraph:
    """Keep, for each destination, incoming edges from its k strongest partners.

    Ties go to the smaller source index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    partners: list[list[tuple[float, int]]] = [[] for _ in range(n_nodes)]
    for (i, j), s in merged.items():
        partners[i].append((s, j))
        partners[j].append((s, i))
    src, dst, w = [], [], []
    for i in range(n_nodes):
        ranked = sorted(partners[i], key=lambda t: (-t[0], t[1]))[:k]
        for s, j in sorted(ranked, key=lambda t: t[1]):
            src.append(j)
            dst.append(i)
            w.append(min(max(s, 0.0), 1.0))
    return FeatureGraph(n_nodes, src, dst, w, feature_names=feature_names, k=k)
