import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from synthbias.nn import (
    AdamState,
    DenseLayer,
    TrainingDiverged,
    adam_step,
    backward,
    blockwise_log_softmax,
    blockwise_softmax,
    cross_entropy,
    forward,
    gradient_check,
    kl_uniform_categorical,
    read_checkpoint,
    write_checkpoint,
)


class TestForward:
    def test_identity_layer(self):
        layer = DenseLayer(np.eye(2), np.zeros(2), "identity")
        assert forward([layer], np.array([[3.0, -4.0]])).out[-1].tolist() == [[3.0, -4.0]]

    def test_relu_zeroes_negatives(self):
        layer = DenseLayer(np.eye(2), np.array([0.0, -1.0]))
        assert forward([layer], np.array([[1.0, 0.5]])).out[-1].tolist() == [[1.0, 0.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward([DenseLayer(np.eye(3), np.zeros(3))], np.zeros((1, 2)))

    def test_two_layers_match_oracle(self):
        rng = np.random.default_rng(1)
        l1 = DenseLayer.init(rng, 5, 4)
        l1.bias[:] = rng.normal(size=4)
        l2 = DenseLayer.init(rng, 4, 3, "identity")
        x = rng.normal(size=(6, 5))
        h = oracles.dense(x.tolist(), l1.weights.tolist(), l1.bias.tolist(), "relu")
        want = oracles.dense(h, l2.weights.tolist(), l2.bias.tolist(), "identity")
        np.testing.assert_allclose(forward([l1, l2], x).out[-1], want, atol=1e-12)

    def test_glorot_limits(self):
        layer = DenseLayer.init(np.random.default_rng(0), 30, 20)
        assert np.abs(layer.weights).max() <= math.sqrt(6 / 50)
        assert not layer.bias.any()


class TestSoftmax:
    def test_two_zeros(self):
        assert blockwise_softmax(np.zeros((1, 2)), [(0, 2)]).tolist() == [[0.5, 0.5]]

    def test_large_logits_stable(self):
        p = blockwise_softmax(np.array([[1000.0, 0.0]]), [(0, 2)])
        assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0)

    def test_blocks_match_oracle(self):
        x = np.random.default_rng(2).normal(size=(4, 7))
        blocks = [(0, 3), (3, 4)]
        p = blockwise_softmax(x, blocks)
        for r in range(4):
            want = oracles.softmax_block(x[r, :3].tolist()) + oracles.softmax_block(x[r, 3:].tolist())
            np.testing.assert_allclose(p[r], want, atol=1e-15)
        np.testing.assert_allclose(np.exp(blockwise_log_softmax(x, blocks)), p, atol=1e-15)

    def test_blocks_must_tile(self):
        with pytest.raises(ValueError):
            blockwise_softmax(np.zeros((1, 5)), [(0, 2), (3, 2)])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-50, 50))
    def test_shift_invariance(self, seed, shift):
        x = np.random.default_rng(seed).normal(size=(3, 6))
        blocks = [(0, 2), (2, 4)]
        np.testing.assert_allclose(blockwise_softmax(x + shift, blocks), blockwise_softmax(x, blocks),
                                   atol=1e-12)


class TestLosses:
    def test_ce_uniform_four(self):
        assert cross_entropy(np.full((3, 4), 0.25), np.eye(4)[[0, 1, 2]]) == pytest.approx(math.log(4))

    def test_ce_matches_oracle(self):
        rng = np.random.default_rng(3)
        p = blockwise_softmax(rng.normal(size=(8, 5)), [(0, 2), (2, 3)])
        t = np.zeros((8, 5))
        t[np.arange(8), rng.integers(0, 2, 8)] = 1
        t[np.arange(8), 2 + rng.integers(0, 3, 8)] = 1
        assert cross_entropy(p, t) == pytest.approx(oracles.cross_entropy(p.tolist(), t.tolist()), abs=1e-12)

    def test_ce_clamps_zero_probability(self):
        assert cross_entropy(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])) == pytest.approx(-math.log(1e-12))

    def test_kl_uniform_is_zero(self):
        assert kl_uniform_categorical(np.full((2, 8), 0.25), 4) == pytest.approx(0.0, abs=1e-15)

    def test_kl_one_hot_is_log_classes(self):
        q = np.tile(np.eye(4)[0], (3, 2))
        assert kl_uniform_categorical(q, 4) == pytest.approx(math.log(4), abs=1e-15)

    def test_kl_matches_oracle(self):
        q = blockwise_softmax(np.random.default_rng(4).normal(size=(5, 9)), [(0, 3), (3, 3), (6, 3)])
        assert kl_uniform_categorical(q, 3) == pytest.approx(oracles.kl_uniform(q.tolist(), 3), abs=1e-12)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState())
        assert p["w"].tolist() == [1.0, -2.0]

    def test_first_step_size(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = {"w": np.zeros(3)}
        adam_step(p, {"w": g}, AdamState(lr=1e-3))
        np.testing.assert_allclose(p["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            p, st_ = {"w": rng.normal(size=4)}, AdamState()
            for _ in range(10):
                adam_step(p, {"w": rng.normal(size=4)}, st_)
            return p["w"]
        assert np.array_equal(run(), run())

    def test_non_finite_gradient(self):
        with pytest.raises(TrainingDiverged, match="w"):
            adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState())

    def test_minimises_quadratic(self):
        p, st_ = {"w": np.array([3.0, -2.0])}, AdamState(lr=0.05)
        for _ in range(2000):
            adam_step(p, {"w": 2 * p["w"]}, st_)
        assert np.abs(p["w"]).max() < 1e-2


class TestGradients:
    def test_quadratic(self):
        a = np.random.default_rng(6).normal(size=(3, 3))
        params = {"w": np.array([0.3, -1.2, 0.7])}
        loss = lambda ps: float(ps["w"] @ a @ ps["w"])  # noqa: E731
        grads = {"w": (a + a.T) @ params["w"]}
        assert gradient_check(loss, params, grads) <= 1e-7

    def test_backward_through_mlp(self):
        rng = np.random.default_rng(7)
        layers = [DenseLayer.init(rng, 4, 6), DenseLayer.init(rng, 6, 5, "softmax", [(0, 2), (2, 3)])]
        for l in layers:
            l.bias[:] = rng.normal(scale=0.1, size=l.bias.shape)
        x = rng.normal(size=(7, 4))
        t = rng.normal(size=(7, 5))

        def loss(_):
            return float((forward(layers, x).out[-1] * t).sum())

        tr = forward(layers, x)
        grads, _ = backward(layers, tr, t)
        params = {f"{i}.{k}": a for i, l in enumerate(layers) for k, a in (("W", l.weights), ("b", l.bias))}
        named = {f"{i}.{k}": g for i, gs in enumerate(grads) for k, g in zip("Wb", gs)}
        assert gradient_check(loss, params, named, samples=100) <= 1e-6

    def test_detects_wrong_gradient(self):
        params = {"w": np.array([1.0, 2.0])}
        loss = lambda ps: float((ps["w"] ** 2).sum())  # noqa: E731
        assert gradient_check(loss, params, {"w": np.array([2.0, 0.0])}) > 0.5


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        params = {"enc.W": rng.normal(size=(3, 4)), "enc.b": rng.normal(size=4), "x": np.zeros((1, 1))}
        write_checkpoint(params, tmp_path / "m.bin")
        back = read_checkpoint(tmp_path / "m.bin")
        assert list(back) == list(params)
        for k in params:
            assert back[k].shape == params[k].shape and np.array_equal(back[k], params[k])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.bin").write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(ValueError, match="magic"):
            read_checkpoint(tmp_path / "m.bin")

    def test_truncated(self, tmp_path):
        write_checkpoint({"w": np.ones(3)}, tmp_path / "m.bin")
        data = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "m.bin").write_bytes(data + b"\0")
        with pytest.raises(ValueError, match="trailing"):
            read_checkpoint(tmp_path / "m.bin")
