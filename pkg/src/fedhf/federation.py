"""Round orchestration: broadcast, local training, FedAvg, early stopping.

The server only ever talks to clients through a transport. Two are provided:
an in-process one that still pushes every message through the wire codec,
and a TCP one for running each client in its own process.
"""

from __future__ import annotations

import logging
import socket
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .datahub import ClientShard
from .featgraph import ClientFeatureReport, FeatureGraph, build_graph, compute_local_correlations, merge_reports
from .imputer import ImputerConfig, ModelParams, init_params
from .protocol import (Kind, Message, ProtocolError, TransportError, decode_message, encode_message,
                       parse_address, read_frame)
from .trainer import TrainConfig, local_train, validation_rmse

logger = logging.getLogger(__name__)


class FederationError(RuntimeError):
    pass


class RoundError(FederationError):
    pass


# -- aggregation ----------------------------------------------------------------

def fedavg(updates: list[tuple[dict[str, np.ndarray] | ModelParams, int]]):
    """Sample-size weighted average of structurally identical parameter sets."""
    if not updates:
        raise FederationError("fedavg needs at least one update")
    as_model = isinstance(updates[0][0], ModelParams)
    named = [(u.named() if isinstance(u, ModelParams) else u, n) for u, n in updates]
    ref = named[0][0]
    for pos, (params, n) in enumerate(named):
        if n <= 0:
            raise FederationError(f"update {pos}: sample count must be positive, got {n}")
        if list(params) != list(ref):
            diverged = next((a for a, b in zip(ref, params) if a != b), None) or \
                (set(ref) ^ set(params)).pop()
            raise FederationError(f"update {pos}: parameter {diverged!r} does not match the first update")
        for name, arr in params.items():
            if arr.shape != ref[name].shape:
                raise FederationError(f"update {pos}: parameter {name!r} shape {arr.shape} != {ref[name].shape}")
    total = sum(n for _, n in named)
    weights = [n / total for _, n in named]
    # Offsets from the first update: identical updates average back to themselves bit-for-bit.
    out = {}
    for name in ref:
        base = named[0][0][name]
        acc = np.zeros_like(base)
        for w, (params, _) in zip(weights[1:], named[1:]):
            acc = acc + w * (params[name] - base)
        out[name] = base + acc
    return updates[0][0].with_values(out) if as_model else out


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 60
    participation: int | None = None  # None -> every client each round
    patience: int | None = 15
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.participation is not None and self.participation < 1:
            raise ValueError(f"participation must be >= 1, got {self.participation}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    n_samples: dict[int, int]
    val_rmse: dict[int, float]
    weights: dict[int, float]
    params_sha256: str
    aggregate_rmse: float
    train_logs: dict[int, list[dict]] = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = asdict(self)
        for key in ("n_samples", "val_rmse", "weights", "train_logs"):
            doc[key] = {str(k): v for k, v in doc[key].items()}
        return doc


@dataclass
class FederationResult:
    final: ModelParams
    history: list[RoundRecord]
    best: ModelParams
    best_round: int
    best_rmse: float
    stopped_early: bool = False


# -- client side ----------------------------------------------------------------

class ClientNode:
    """Everything a client does: report correlations, train, validate."""

    def __init__(self, shard: ClientShard, imputer: ImputerConfig, train: TrainConfig,
                 train_seed: int, val_seed: int, min_support: int = 10, manifest_hash: str = "") -> None:
        self.shard = shard
        self.client_id = shard.client_id
        self.imputer = imputer
        self.train = train
        self.train_seed = train_seed
        self.val_seed = val_seed
        self.min_support = min_support
        self.manifest_hash = manifest_hash
        self.graph: FeatureGraph | None = None
        self.graph_hash: str | None = None
        self._template = init_params(imputer, np.random.default_rng(0))
        self.finished = False

    def greeting(self) -> list[Message]:
        report = compute_local_correlations(
            self.shard.train.values, self.shard.train_mask.observation, self.shard.availability,
            client_id=self.client_id, min_support=self.min_support)
        hello = {"client_id": self.client_id, "manifest_hash": self.manifest_hash}
        return [Message.json(Kind.HELLO, 0, hello),
                Message.json(Kind.FEATURE_REPORT, 0, report.to_json())]

    def run_round(self, t: int, params: ModelParams) -> tuple[ModelParams, dict]:
        if self.graph is None:
            raise FederationError(f"client {self.client_id}: no feature graph received")
        rng = np.random.default_rng([self.train_seed, t])
        result = local_train(params, self.shard, self.graph, self.train, rng)
        rho_val = self.train.rho_val if self.train.rho_val is not None else self.train.rho
        rmse = validation_rmse(result.params, self.shard, self.graph, self.val_seed, rho_val)
        metrics = {
            "client_id": self.client_id,
            "n_samples": result.n_samples,
            "val_rmse": rmse,
            "graph_sha256": self.graph_hash,
            "steps": result.n_steps,
            "epochs": [asdict(e) for e in result.epochs],
        }
        return result.params, metrics

    def handle(self, msg: Message) -> list[Message]:
        if msg.kind == Kind.GRAPH_DISTRIBUTION:
            self.graph = FeatureGraph.from_json(msg.doc())
            self.graph_hash = self.graph.sha256()
            return []
        if msg.kind == Kind.PARAM_BROADCAST:
            params = self._template.from_bytes(msg.payload)
            try:
                new, metrics = self.run_round(msg.round, params)
            except Exception as exc:
                logger.exception("client %d failed in round %d", self.client_id, msg.round)
                return [Message(Kind.SHUTDOWN, msg.round, f"error: {type(exc).__name__}: {exc}".encode())]
            return [Message(Kind.PARAM_UPDATE, msg.round, new.to_bytes()),
                    Message.json(Kind.METRICS_REPORT, msg.round, metrics)]
        if msg.kind == Kind.SHUTDOWN:
            self.finished = True
            return []
        raise ProtocolError(f"client {self.client_id}: unexpected {msg.kind.name}")


# -- transports ------------------------------------------------------------------

class Transport:
    """Server-side view of the clients. Every frame is logged for auditing."""

    def __init__(self) -> None:
        self.log: list[dict] = []

    def _note(self, direction: str, client: int, frame: bytes) -> Message:
        msg = decode_message(frame)
        self.log.append({"dir": direction, "client": client, "kind": msg.kind.name,
                         "round": msg.round, "bytes": len(frame)})
        return msg

    client_ids: list[int]

    def greetings(self) -> dict[int, tuple[dict, ClientFeatureReport]]:
        raise NotImplementedError

    def send_all(self, msg: Message, clients: list[int] | None = None) -> None:
        raise NotImplementedError

    def exchange(self, requests: dict[int, Message]) -> dict[int, list[Message]]:
        """Send one request per client and collect that client's replies."""
        raise NotImplementedError

    def close(self) -> None:
        pass


def _parse_greeting(msgs: list[Message]) -> tuple[dict, ClientFeatureReport]:
    if len(msgs) != 2 or msgs[0].kind != Kind.HELLO or msgs[1].kind != Kind.FEATURE_REPORT:
        raise ProtocolError("expected HELLO followed by FEATURE_REPORT")
    return msgs[0].doc(), ClientFeatureReport.from_json(msgs[1].doc())


class InProcessTransport(Transport):
    def __init__(self, clients: list[ClientNode], workers: int = 1) -> None:
        super().__init__()
        self.clients = {c.client_id: c for c in clients}
        self.client_ids = sorted(self.clients)
        self.workers = max(1, workers)

    def _call(self, cid: int, frame: bytes) -> list[bytes]:
        replies = self.clients[cid].handle(decode_message(frame))
        return [encode_message(r) for r in replies]

    def greetings(self):
        out = {}
        for cid in self.client_ids:
            frames = [encode_message(m) for m in self.clients[cid].greeting()]
            out[cid] = _parse_greeting([self._note("up", cid, f) for f in frames])
        return out

    def send_all(self, msg, clients=None):
        for cid in clients or self.client_ids:
            frame = encode_message(msg)
            self._note("down", cid, frame)
            for reply in self._call(cid, frame):
                self._note("up", cid, reply)

    def exchange(self, requests):
        frames = {cid: encode_message(m) for cid, m in requests.items()}
        for cid in sorted(frames):
            self._note("down", cid, frames[cid])
        order = sorted(frames)
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(lambda c: self._call(c, frames[c]), order))
        else:
            results = [self._call(c, frames[c]) for c in order]
        return {cid: [self._note("up", cid, f) for f in replies] for cid, replies in zip(order, results)}


class TcpServerTransport(Transport):
    """Accepts ``n_clients`` connections; each must greet with a matching manifest hash."""

    def __init__(self, address: str, n_clients: int, manifest_hash: str | None = None,
                 timeout: float = 600.0) -> None:
        super().__init__()
        host, port = parse_address(address)
        self.n_clients = n_clients
        self.manifest_hash = manifest_hash
        self.timeout = timeout
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(timeout)
        self.address = "%s:%d" % self._listener.getsockname()[:2]
        self._conns: dict[int, socket.socket] = {}
        self.client_ids: list[int] = []

    def _recv(self, cid: int, sock: socket.socket) -> Message:
        return self._note("up", cid, read_frame(sock))

    def _send(self, cid: int, sock: socket.socket, msg: Message) -> None:
        frame = encode_message(msg)
        self._note("down", cid, frame)
        sock.sendall(frame)

    def greetings(self):
        out = {}
        while len(self._conns) < self.n_clients:
            sock, peer = self._listener.accept()
            sock.settimeout(self.timeout)
            try:
                hello = self._recv(-1, sock)
                if hello.kind != Kind.HELLO:
                    raise ProtocolError(f"expected HELLO, got {hello.kind.name}")
                doc = hello.doc()
                cid = int(doc["client_id"])
                if cid in self._conns or not 0 <= cid < self.n_clients:
                    raise ProtocolError(f"duplicate or out-of-range client id {cid}")
                if self.manifest_hash is not None and doc.get("manifest_hash") != self.manifest_hash:
                    raise ProtocolError(f"client {cid}: shard manifest hash mismatch")
                report = self._recv(cid, sock)
                greeting = _parse_greeting([hello, report])
            except (TransportError, KeyError, ValueError, OSError) as exc:
                logger.warning("rejecting connection from %s: %s", peer, exc)
                try:
                    sock.sendall(encode_message(Message(Kind.SHUTDOWN, 0, f"rejected: {exc}".encode())))
                except OSError:
                    pass
                sock.close()
                continue
            self._conns[cid] = sock
            out[cid] = greeting
        self.client_ids = sorted(self._conns)
        return out

    def send_all(self, msg, clients=None):
        for cid in clients or self.client_ids:
            self._send(cid, self._conns[cid], msg)

    def exchange(self, requests):
        for cid in sorted(requests):
            self._send(cid, self._conns[cid], requests[cid])
        out = {}
        for cid in sorted(requests):
            first = self._recv(cid, self._conns[cid])
            if first.kind == Kind.SHUTDOWN:
                out[cid] = [first]
                continue
            out[cid] = [first, self._recv(cid, self._conns[cid])]
        return out

    def close(self):
        for cid, sock in self._conns.items():
            try:
                self._send(cid, sock, Message(Kind.SHUTDOWN, 0, b""))
            except OSError:
                pass
            sock.close()
        self._conns.clear()
        self._listener.close()


def serve_client(node: ClientNode, address: str, timeout: float = 600.0) -> None:
    """Client process main loop: greet, then answer frames until SHUTDOWN."""
    with socket.create_connection(parse_address(address), timeout=timeout) as sock:
        for msg in node.greeting():
            sock.sendall(encode_message(msg))
        while not node.finished:
            msg = decode_message(read_frame(sock))
            if msg.kind == Kind.SHUTDOWN and msg.payload:
                raise FederationError(f"server closed the session: {msg.payload.decode(errors='replace')}")
            for reply in node.handle(msg):
                sock.sendall(encode_message(reply))


# -- server side ----------------------------------------------------------------

def establish_graph(transport: Transport, n_nodes: int, k: int,
                    feature_names: list[str] | None = None) -> tuple[FeatureGraph, dict[int, dict]]:
    """Collect correlation reports, build the graph once and ship it to every client."""
    greetings = transport.greetings()
    reports = [greetings[cid][1] for cid in sorted(greetings)]
    graph = build_graph(merge_reports(reports), n_nodes, k, feature_names)
    transport.send_all(Message.json(Kind.GRAPH_DISTRIBUTION, 0, graph.to_json()))
    return graph, {cid: g[0] for cid, g in greetings.items()}


def select_clients(client_ids: list[int], config: FederationConfig, t: int) -> list[int]:
    if config.participation is None or config.participation >= len(client_ids):
        return list(client_ids)
    rng = np.random.default_rng([config.seed, t])
    return sorted(rng.choice(client_ids, size=config.participation, replace=False).tolist())


def run_round(transport: Transport, params: ModelParams, graph: FeatureGraph, t: int,
              config: FederationConfig) -> tuple[ModelParams, RoundRecord]:
    participants = select_clients(transport.client_ids, config, t)
    payload = params.to_bytes()
    replies = transport.exchange({cid: Message(Kind.PARAM_BROADCAST, t, payload) for cid in participants})
    graph_hash = graph.sha256()
    updates, n_samples, rmse, logs = [], {}, {}, {}
    for cid in participants:
        msgs = replies[cid]
        if msgs[0].kind == Kind.SHUTDOWN:
            raise RoundError(f"round {t}: client {cid} failed: {msgs[0].payload.decode(errors='replace')}")
        if [m.kind for m in msgs] != [Kind.PARAM_UPDATE, Kind.METRICS_REPORT]:
            raise RoundError(f"round {t}: client {cid} sent {[m.kind.name for m in msgs]}")
        if any(m.round != t for m in msgs):
            raise RoundError(f"round {t}: client {cid} answered for another round")
        metrics = msgs[1].doc()
        if metrics.get("graph_sha256") != graph_hash:
            raise RoundError(f"round {t}: client {cid} trained on a different feature graph")
        updates.append((params.from_bytes(msgs[0].payload), int(metrics["n_samples"])))
        n_samples[cid] = int(metrics["n_samples"])
        rmse[cid] = float(metrics["val_rmse"])
        logs[cid] = metrics.get("epochs", [])
    new = fedavg(updates)
    total = sum(n_samples.values())
    weights = {cid: n_samples[cid] / total for cid in participants}
    agg = float(sum(weights[cid] * rmse[cid] for cid in participants))
    record = RoundRecord(t, participants, n_samples, rmse, weights, new.sha256(), agg, logs)
    return new, record


def run_federation(config: FederationConfig, transport: Transport, theta0: ModelParams,
                   graph: FeatureGraph, on_round=None) -> FederationResult:
    params = theta0
    history: list[RoundRecord] = []
    best, best_round, best_rmse = theta0, -1, float("inf")
    stale = 0
    stopped = False
    for t in range(config.rounds):
        params, record = run_round(transport, params, graph, t, config)
        history.append(record)
        if on_round is not None:
            on_round(record)
        logger.info("round %d: aggregate validation RMSE %.5f", t, record.aggregate_rmse)
        if record.aggregate_rmse < best_rmse:
            best, best_round, best_rmse = params, t, record.aggregate_rmse
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                stopped = True
                break
    return FederationResult(params, history, best, best_round, best_rmse, stopped)
