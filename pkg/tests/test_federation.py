import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedhf.experiment import ExperimentConfig, initial_params, make_client, prepare
from fedhf.featgraph import FeatureGraph
from fedhf.federation import (FederationConfig, FederationError, InProcessTransport, RoundError,
                              TcpServerTransport, establish_graph, fedavg, run_federation, select_clients,
                              serve_client)
from fedhf.protocol import Kind, decode_message
from fedhf.trainer import local_train


def small_config(**kw):
    base = dict(synthetic="f=6,factors=2,n=400", clients=3, keep=0.7, embed_dim=4, layers=1, hidden=8,
                batch=32, rounds=3, lr=1e-2, graph_k=3)
    base.update(kw)
    return ExperimentConfig(**base).validate()


def federate(config, seed=0, transport=None, fed_config=None):
    prepared = prepare(config, seed)
    if transport is None:
        transport = InProcessTransport([make_client(prepared, s) for s in prepared.shards], config.workers)
    graph, _ = establish_graph(transport, prepared.n_features, config.graph_k)
    result = run_federation(fed_config or config.federation(seed), transport, initial_params(prepared), graph)
    return prepared, transport, graph, result


class TestFedAvg:
    def test_single_client_identity(self):
        theta = {"w": np.array([[1.5, -2.0]])}
        assert fedavg([(theta, 17)])["w"].tobytes() == theta["w"].tobytes()

    def test_opposites_cancel(self):
        theta = {"w": np.array([[1.0, 2.0, -3.0]])}
        out = fedavg([(theta, 5), ({"w": -theta["w"]}, 5)])
        assert not out["w"].any()

    def test_weighted_scalar(self):
        out = fedavg([({"w": np.array([[v]])}, n) for v, n in ((1.0, 6), (2.0, 3), (3.0, 2))])
        assert out["w"][0, 0] == pytest.approx(18 / 11, abs=1e-15)
        out = fedavg([({"w": np.array([[v]])}, n) for v, n in ((6.0, 1), (3.0, 2), (2.0, 3))])
        assert out["w"][0, 0] == 3.0

    def test_mismatch_names_parameter(self):
        a = {"w": np.zeros((1, 2)), "b": np.zeros((1, 1))}
        with pytest.raises(FederationError, match="'b'"):
            fedavg([(a, 1), ({"w": np.zeros((1, 2)), "c": np.zeros((1, 1))}, 1)])
        with pytest.raises(FederationError, match="'w' shape"):
            fedavg([(a, 1), ({"w": np.zeros((2, 2)), "b": np.zeros((1, 1))}, 1)])

    def test_bad_counts(self):
        with pytest.raises(FederationError):
            fedavg([])
        with pytest.raises(FederationError):
            fedavg([({"w": np.zeros((1, 1))}, 0)])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.integers(1, 1000)), min_size=1, max_size=6))
    def test_convex_combination(self, items):
        out = fedavg([({"w": np.array([[v]])}, n) for v, n in items])["w"][0, 0]
        vals = [v for v, _ in items]
        tol = 1e-12 * max(1.0, max(abs(v) for v in vals))
        assert min(vals) - tol <= out <= max(vals) + tol


def test_select_clients():
    cfg = FederationConfig(participation=2, seed=4)
    picks = [select_clients([0, 1, 2, 3], cfg, t) for t in range(20)]
    assert all(len(p) == 2 and p == sorted(set(p)) for p in picks)
    assert picks == [select_clients([0, 1, 2, 3], cfg, t) for t in range(20)]
    assert len({tuple(p) for p in picks}) > 1
    assert select_clients([0, 1], FederationConfig(), 0) == [0, 1]


class TestRounds:
    def test_single_client_round_is_local_training(self):
        config = small_config(clients=1, rounds=1)
        prepared, transport, graph, result = federate(config)
        node = transport.clients[0]
        theta0 = initial_params(prepared)
        local = local_train(theta0, node.shard, graph, node.train, np.random.default_rng([node.train_seed, 0]))
        assert result.final.to_bytes() == local.params.to_bytes()
        assert result.history[0].weights == {0: 1.0}

    def test_zero_lr_keeps_theta_and_triggers_patience(self):
        config = small_config(lr=0.0, rounds=20, patience=3)
        prepared, _, _, result = federate(config)
        assert result.final.to_bytes() == initial_params(prepared).to_bytes()
        assert len(result.history) == 4 and result.stopped_early
        assert result.best_round == 0
        assert len({r.aggregate_rmse for r in result.history}) == 1

    def test_one_round(self):
        _, _, _, result = federate(small_config(rounds=1))
        assert result.best_round == 0 and len(result.history) == 1
        assert result.best.to_bytes() == result.final.to_bytes()

    def test_weights_and_aggregate(self):
        _, _, _, result = federate(small_config())
        for rec in result.history:
            total = sum(rec.n_samples.values())
            assert rec.weights == {c: n / total for c, n in rec.n_samples.items()}
            assert rec.aggregate_rmse == pytest.approx(sum(rec.weights[c] * rec.val_rmse[c] for c in rec.weights))

    def test_best_is_argmin(self):
        _, _, _, result = federate(small_config(rounds=6))
        rmses = [r.aggregate_rmse for r in result.history]
        assert result.best_round == int(np.argmin(rmses))
        assert result.best_rmse == min(rmses)
        assert result.best.sha256() == result.history[result.best_round].params_sha256

    def test_deterministic(self):
        a = federate(small_config())[3]
        b = federate(small_config())[3]
        assert a.final.to_bytes() == b.final.to_bytes()
        assert [r.to_json() for r in a.history] == [r.to_json() for r in b.history]

    def test_thread_pool_matches_serial(self):
        a = federate(small_config())[3]
        b = federate(small_config(workers=3))[3]
        assert a.final.to_bytes() == b.final.to_bytes()

    def test_partial_participation(self):
        _, _, _, result = federate(small_config(participation=2, rounds=4))
        assert all(len(r.participants) == 2 for r in result.history)

    def test_client_failure_aborts_round(self):
        config = small_config()
        prepared = prepare(config, 0)
        nodes = [make_client(prepared, s) for s in prepared.shards]

        def broken(t, params):
            raise RuntimeError("disk on fire")
        nodes[1].run_round = broken
        transport = InProcessTransport(nodes)
        graph, _ = establish_graph(transport, prepared.n_features, config.graph_k)
        with pytest.raises(RoundError, match="client 1 failed.*disk on fire"):
            run_federation(config.federation(0), transport, initial_params(prepared), graph)

    def test_graph_mismatch_detected(self):
        config = small_config()
        prepared = prepare(config, 0)
        transport = InProcessTransport([make_client(prepared, s) for s in prepared.shards])
        graph, _ = establish_graph(transport, prepared.n_features, config.graph_k)
        transport.clients[2].graph = FeatureGraph(prepared.n_features, [0], [1], [0.3])
        transport.clients[2].graph_hash = transport.clients[2].graph.sha256()
        with pytest.raises(RoundError, match="different feature graph"):
            run_federation(config.federation(0), transport, initial_params(prepared), graph)


class RecordingTransport(InProcessTransport):
    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.frames = []

    def _note(self, direction, client, frame):
        self.frames.append((direction, client, bytes(frame)))
        return super()._note(direction, client, frame)


def test_no_raw_rows_leave_clients():
    config = small_config()
    prepared = prepare(config, 0)
    transport = RecordingTransport([make_client(prepared, s) for s in prepared.shards])
    graph, _ = establish_graph(transport, prepared.n_features, config.graph_k)
    result = run_federation(config.federation(0), transport, initial_params(prepared), graph)
    blob = len(result.final.to_bytes())
    up = [(c, decode_message(f)) for d, c, f in transport.frames if d == "up"]
    assert {m.kind for _, m in up} == {Kind.HELLO, Kind.FEATURE_REPORT, Kind.PARAM_UPDATE, Kind.METRICS_REPORT}
    for _, msg in up:
        if msg.kind == Kind.PARAM_UPDATE:
            assert len(msg.payload) == blob
        if msg.kind == Kind.METRICS_REPORT:
            assert set(msg.doc()) == {"client_id", "n_samples", "val_rmse", "graph_sha256", "steps", "epochs"}
        if msg.kind == Kind.FEATURE_REPORT:
            assert set(msg.doc()) == {"client_id", "available", "pairs"}
    # no stored cell value (raw or standardized) appears verbatim in any upstream frame
    for shard in prepared.shards:
        cells = np.concatenate([shard.train.values.ravel(), shard.val.values.ravel()])
        cells = cells[np.isfinite(cells) & (cells != 0)]
        raw = prepared.shards[0].stats.inverse(shard.train.values)
        needles = {struct.pack("<d", v) for v in cells} | {struct.pack("<d", v) for v in raw[np.isfinite(raw)]}
        for cid, msg in up:
            if cid == shard.client_id:
                assert not any(n in msg.payload for n in needles)
    assert all(e["kind"] in {"GRAPH_DISTRIBUTION", "PARAM_BROADCAST"} for e in transport.log if e["dir"] == "down")


def run_tcp(config, seed=0, manifest_for=None):
    prepared = prepare(config, seed)
    server = TcpServerTransport("127.0.0.1:0", config.clients, prepared.manifest_hash(), timeout=60)
    nodes = [make_client(prepared, s) for s in prepared.shards]
    if manifest_for is not None:
        nodes[manifest_for].manifest_hash = "bogus"
    errors = []

    def client(node):
        try:
            serve_client(node, server.address, timeout=60)
        except Exception as exc:  # surfaced through `errors`
            errors.append((node.client_id, exc))
    threads = [threading.Thread(target=client, args=(n,), daemon=True) for n in nodes]
    for t in threads:
        t.start()
    return prepared, server, nodes, threads, errors


def test_tcp_matches_in_process():
    config = small_config()
    prepared, server, _, threads, errors = run_tcp(config)
    try:
        graph, _ = establish_graph(server, prepared.n_features, config.graph_k)
        tcp = run_federation(config.federation(0), server, initial_params(prepared), graph)
    finally:
        server.close()
    for t in threads:
        t.join(30)
    assert not errors
    local = federate(config)[3]
    assert tcp.final.to_bytes() == local.final.to_bytes()
    assert [r.to_json() for r in tcp.history] == [r.to_json() for r in local.history]


def test_tcp_rejects_manifest_mismatch():
    config = small_config(clients=2)
    prepared, server, nodes, threads, errors = run_tcp(config, manifest_for=1)
    accepted = []

    def greet():
        try:
            accepted.append(server.greetings())
        except Exception as exc:
            accepted.append(exc)
    waiter = threading.Thread(target=greet, daemon=True)
    waiter.start()
    threads[1].join(30)
    assert errors and errors[0][0] == 1 and "manifest" in str(errors[0][1])
    server._listener.close()
    for conn in server._conns.values():
        conn.close()
