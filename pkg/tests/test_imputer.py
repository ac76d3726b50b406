import numpy as np
import pytest

from fedhf import numkit as nk
from fedhf.featgraph import FeatureGraph
from fedhf.imputer import (BatchInput, ImputerConfig, encode, impute, init_params, load_checkpoint, message_pass,
                           predict, save_checkpoint)

from oracles import encode_loop, finite_difference, predict_loop, random_graph, random_setup, rel_err


def batch_of(vals, mask):
    return BatchInput.from_values(vals, mask.observation, mask.availability)


def test_config_validation():
    with pytest.raises(ValueError):
        ImputerConfig(3, embed_dim=0)
    with pytest.raises(ValueError):
        ImputerConfig(3, n_layers=0)


def test_batch_input_zero_fills():
    vals = np.array([[1.0, np.nan, 3.0]])
    b = BatchInput.from_values(vals, ~np.isnan(vals), np.array([True, True, False]))
    np.testing.assert_array_equal(b.x, [[1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(b.m, [[1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(b.a, [1.0, 1.0, 0.0])


class TestEncode:
    def test_identity_on_embeddings(self):
        d, F = 3, 4
        params = init_params(ImputerConfig(F, d, 1, hidden=d + 3), np.random.default_rng(0))
        first, second = params.mlp_in.layers
        first.weight[:] = 0
        first.weight[:d, :d] = np.eye(d)
        second.weight[:] = 0
        second.weight[:d, :d] = np.eye(d)
        params.embeddings[:] = np.abs(params.embeddings)  # positive so the ReLU passes them through
        batch = BatchInput(np.zeros((1, F)), np.zeros((1, F)), np.zeros(F))
        h = encode(params, batch, nk.Tape()).value
        np.testing.assert_allclose(h, params.embeddings, atol=1e-15)

    def test_identical_rows_identical_states(self):
        rng = np.random.default_rng(1)
        params = init_params(ImputerConfig(5, 4, 1, 8), rng)
        row = rng.normal(size=5)
        batch = BatchInput(np.vstack([row, row]), np.ones((2, 5)), np.ones(5))
        h = encode(params, batch, nk.Tape()).value
        np.testing.assert_array_equal(h[:5], h[5:])

    def test_matches_loop(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            params, graph, vals, mask = random_setup(rng)
            batch = batch_of(vals, mask)
            h = encode(params, batch, nk.Tape()).value
            ref = encode_loop(params, batch.x, batch.m, batch.a).reshape(h.shape)
            np.testing.assert_allclose(h, ref, atol=1e-12, rtol=0)

    def test_feature_mismatch(self):
        params = init_params(ImputerConfig(4), np.random.default_rng(0))
        with pytest.raises(nk.ShapeError):
            encode(params, BatchInput(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros(3)), nk.Tape())


class TestMessagePass:
    def test_empty_graph_zero_mlp_is_identity(self):
        rng = np.random.default_rng(0)
        params = init_params(ImputerConfig(3, 2, 1, 4), rng)
        for layer in params.layers[0].layers:
            layer.weight[:] = 0
        graph = FeatureGraph(3, [], [], [])
        tape = nk.Tape()
        h = tape.const(rng.normal(size=(6, 2)))
        out = message_pass(params.layers[0], graph, h, 2)
        np.testing.assert_array_equal(out.value, h.value)

    def test_single_edge_projection(self):
        d = 2
        params = init_params(ImputerConfig(2, d, 1, hidden=2 * d), np.random.default_rng(0))
        mlp = params.layers[0]
        graph = FeatureGraph(2, [1], [0], [1.0])
        tape = nk.Tape()
        h = tape.const(np.array([[1.0, 2.0], [3.0, 4.0]]))
        for layer in mlp.layers:
            layer.weight[:] = 0
        assert (message_pass(mlp, graph, h, 1).value == h.value).all()
        # project the message half through two ReLU-transparent identity layers
        mlp.layers[0].weight[:] = 0
        mlp.layers[0].weight[d:, :d] = np.eye(d)
        mlp.layers[1].weight[:] = 0
        mlp.layers[1].weight[:d, :] = np.eye(d)
        out = message_pass(mlp, graph, tape.const(h.value), 1).value
        np.testing.assert_array_equal(out[0], [4.0, 6.0])
        np.testing.assert_array_equal(out[1], [3.0, 4.0])

    def test_aggregation_matches_dense(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(1, 7))
            B, d = int(rng.integers(1, 4)), int(rng.integers(1, 5))
            graph = random_graph(rng, n)
            h = rng.normal(size=(B * n, d))
            out = nk.edge_scatter(nk.Tape().const(h), graph.src, graph.dst, graph.weight, B, n).value
            dense = graph.dense()
            for b in range(B):
                assert np.abs(out[b * n:(b + 1) * n] - dense @ h[b * n:(b + 1) * n]).max(initial=0) < 1e-12


class TestPredict:
    def test_zero_head(self):
        params = init_params(ImputerConfig(4), np.random.default_rng(0))
        for layer in params.mlp_out.layers:
            layer.weight[:] = 0
        rng = np.random.default_rng(1)
        batch = BatchInput(rng.normal(size=(3, 4)), np.ones((3, 4)), np.ones(4))
        assert not predict(params, random_graph(rng, 4), batch).any()

    def test_matches_loop(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            params, graph, vals, mask = random_setup(rng)
            batch = batch_of(vals, mask)
            np.testing.assert_allclose(predict(params, graph, batch),
                                       predict_loop(params, graph, batch.x, batch.m, batch.a), atol=1e-12)

    def test_row_permutation(self):
        rng = np.random.default_rng(5)
        params, graph, vals, mask = random_setup(rng, B=3)
        batch = batch_of(vals, mask)
        perm = np.array([2, 0, 1])
        permuted = BatchInput(batch.x[perm], batch.m[perm], batch.a)
        np.testing.assert_allclose(predict(params, graph, permuted), predict(params, graph, batch)[perm], atol=1e-13)

    def test_mean_output_gradient(self):
        rng = np.random.default_rng(6)
        params, graph, vals, mask = random_setup(rng, F=4, d=3, L=2, B=2, hidden=4)
        batch = batch_of(vals, mask)
        from fedhf.imputer import forward
        tape = nk.Tape()
        out = forward(params, graph, batch, tape)
        grads = tape.backward(np.full(out.shape, 1.0 / out.value.size))
        numeric = finite_difference(lambda: float(predict_loop(params, graph, batch.x, batch.m, batch.a).mean()),
                                    params.named())
        for name in numeric:
            assert rel_err(grads[name], numeric[name]) < 1e-4, name

    def test_graph_locality(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            F = 6
            params, graph, _, _ = random_setup(rng, F=F, L=int(rng.integers(1, 3)), B=1)
            L = len(params.layers)
            x = rng.normal(size=(1, F))
            batch = BatchInput(x, np.ones((1, F)), np.ones(F))
            base = predict(params, graph, batch)
            adj = graph.dense() > 0  # adj[i, j]: edge j -> i
            reach = np.eye(F, dtype=bool)
            step = np.eye(F, dtype=bool)
            for _ in range(L):
                step = (adj.astype(int) @ step.astype(int)) > 0
                reach |= step
            for j in range(F):
                x2 = x.copy()
                x2[0, j] += 1.0
                changed = np.abs(predict(params, graph, BatchInput(x2, batch.m, batch.a)) - base)[0] > 0
                assert not (changed & ~reach[:, j]).any()


class TestImpute:
    def setup_model(self, F=4):
        rng = np.random.default_rng(8)
        return init_params(ImputerConfig(F, 3, 1, 8), rng), random_graph(rng, F)

    def test_fully_observed_unchanged(self):
        params, graph = self.setup_model()
        vals = np.random.default_rng(0).normal(size=(5, 4))
        out = impute(params, graph, vals, np.ones((5, 4), dtype=bool), np.ones(4, dtype=bool))
        assert out.tobytes() == vals.tobytes()

    def test_unavailable_column_stays_missing(self):
        params, graph = self.setup_model()
        vals = np.random.default_rng(1).normal(size=(5, 4))
        vals[:, 2] = np.nan
        avail = np.array([True, True, False, True])
        out = impute(params, graph, vals, ~np.isnan(vals) & avail, avail)
        assert np.isnan(out[:, 2]).all()

    def test_exact_support(self):
        params, graph = self.setup_model()
        vals = np.random.default_rng(2).normal(size=(3, 4))
        vals[1, 3] = np.nan
        out = impute(params, graph, vals, ~np.isnan(vals), np.ones(4, dtype=bool))
        diff = ~((out == vals) | (np.isnan(out) & np.isnan(vals)))
        assert diff.sum() == 1 and diff[1, 3] and np.isfinite(out[1, 3])

    def test_predictions_deterministic(self):
        rng = np.random.default_rng(9)
        params, graph, vals, mask = random_setup(rng)
        batch = batch_of(vals, mask)
        assert predict(params, graph, batch).tobytes() == predict(params, graph, batch).tobytes()


def test_param_round_trip_and_checkpoint(tmp_path):
    rng = np.random.default_rng(0)
    cfg = ImputerConfig(5, 3, 2, 7)
    params = init_params(cfg, rng)
    back = params.from_bytes(params.to_bytes())
    for name, arr in params.named().items():
        np.testing.assert_array_equal(back.named()[name], arr)
    graph = random_graph(rng, 5)
    save_checkpoint(params, cfg, graph, tmp_path / "m.fhf")
    loaded, cfg2 = load_checkpoint(tmp_path / "m.fhf", graph)
    assert cfg2 == cfg and loaded.to_bytes() == params.to_bytes()
    other = FeatureGraph(5, [0], [1], [0.5])
    with pytest.raises(ValueError, match="different feature graph"):
        load_checkpoint(tmp_path / "m.fhf", other)


def test_from_bytes_rejects_other_structure():
    a = init_params(ImputerConfig(5, 3, 2, 7), np.random.default_rng(0))
    b = init_params(ImputerConfig(5, 3, 1, 7), np.random.default_rng(0))
    with pytest.raises(nk.SerializationError):
        a.from_bytes(b.to_bytes())
