import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_matmul, reference_lstm
from distinqt.numcore import (
    Adam, BiLSTM, Dense, Fragment, LSTM, MissingCacheError, NonFiniteError,
    grad_check, mse_loss,
)


class LayerFragment(Fragment):
    def __init__(self, layer, x, kind):
        self.layer, self.inputs, self.kind = layer, x, kind
        self.params = layer.params

    @property
    def grads(self):
        return self.layer.grads

    def forward(self):
        if self.kind == "dense":
            return self.layer.forward(self.inputs)
        if self.kind == "lstm":
            hs, _, _ = self.layer.forward(self.inputs)
            return hs
        outs, summary = self.layer.forward(self.inputs)
        return np.concatenate([outs.reshape(-1), summary.reshape(-1)])

    def backward(self, dout):
        if self.kind == "bilstm":
            n = dout.size - 2 * self.layer.units * (self.inputs.shape[0] if self.inputs.ndim == 3 else 1)
            outs_shape = self.layer.fwd._cache[2].shape[:-1] + (2 * self.layer.units,)
            if self.inputs.ndim == 2:
                outs_shape = outs_shape[1:]
            douts = dout[:n].reshape(outs_shape)
            dsum = dout[n:].reshape(outs_shape[:-2] + (2 * self.layer.units,))
            return self.layer.backward(douts, dsum)
        return self.layer.backward(dout)

    def penalty(self):
        return self.layer.l2_penalty()


class TestDense:
    def test_identity(self):
        d = Dense(2, 2, activation="identity")
        d.params["W"][...] = np.eye(2)
        npt.assert_array_equal(d.forward(np.array([[3.0, -1.0]])), [[3.0, -1.0]])

    def test_relu_clamps(self):
        d = Dense(2, 2, activation="relu")
        d.params["W"][...] = np.eye(2)
        npt.assert_array_equal(d.forward(np.array([[3.0, -1.0]])), [[3.0, 0.0]])

    def test_matches_naive_matmul(self):
        rng = np.random.default_rng(7)
        d = Dense(3, 2, activation="identity", rng=rng)
        d.params["b"][...] = rng.normal(size=2)
        x = rng.normal(size=(4, 3))
        ref = np.array(naive_matmul(x.tolist(), d.params["W"].tolist())) + d.params["b"]
        npt.assert_allclose(d.forward(x), ref, atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Dense(3, 2).forward(np.zeros((1, 4)))

    def test_backward_without_forward(self):
        with pytest.raises(MissingCacheError):
            Dense(3, 2).backward(np.zeros((1, 2)))

    def test_zero_upstream_zero_grads(self):
        d = Dense(3, 2, rng=np.random.default_rng(1))
        d.forward(np.ones((2, 3)))
        dx = d.backward(np.zeros((2, 2)))
        assert not dx.any()
        assert all(not g.any() for g in d.grads.values())

    def test_l2_gradient_term(self):
        d = Dense(1, 1, activation="identity", l2=0.5)
        d.params["W"][...] = 2.0
        d.forward(np.array([[1.0]]))
        d.backward(np.array([[0.0]]))
        npt.assert_array_equal(d.grads["W"], [[2.0]])

    def test_l2_penalty_value(self):
        d = Dense(2, 2, l2=0.25, rng=np.random.default_rng(3))
        assert d.l2_penalty() == pytest.approx(0.25 * np.sum(d.params["W"] ** 2), abs=0)


class TestLSTM:
    def test_zero_weights_freeze_state(self):
        layer = LSTM(3, 4)
        for v in layer.params.values():
            v[...] = 0.0
        _, hT, cT = layer.forward(np.random.default_rng(0).normal(size=(6, 3)))
        assert not hT.any() and not cT.any()

    def test_single_step_closed_form(self):
        layer = LSTM(1, 1)
        layer.params["W"][...] = [[0.5, -0.2, 1.0, -0.3]]
        layer.params["U"][...] = 0.0
        layer.params["b"][...] = [0.1, 0.0, -0.1, 0.2]
        x = 2.0
        i = 1 / (1 + math.exp(-(0.5 * x + 0.1)))
        g = math.tanh(1.0 * x - 0.1)
        o = 1 / (1 + math.exp(-(-0.3 * x + 0.2)))
        c = i * g
        h = o * math.tanh(c)
        _, hT, cT = layer.forward(np.array([[x]]))
        assert hT[0] == pytest.approx(h, abs=1e-15)
        assert cT[0] == pytest.approx(c, abs=1e-15)

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(11)
        layer = LSTM(2, 3, rng=rng)
        layer.params["b"][...] = rng.normal(scale=0.5, size=12)
        seq = rng.normal(size=(5, 2))
        hs, hT, cT = layer.forward(seq)
        ref_hs, ref_h, ref_c = reference_lstm(
            layer.params["W"].tolist(), layer.params["U"].tolist(),
            layer.params["b"].tolist(), seq.tolist(), 3)
        npt.assert_allclose(hs, ref_hs, atol=1e-12, rtol=0)
        npt.assert_allclose(hT, ref_h, atol=1e-12, rtol=0)
        npt.assert_allclose(cT, ref_c, atol=1e-12, rtol=0)

    def test_batched_equals_unbatched(self):
        rng = np.random.default_rng(2)
        layer = LSTM(2, 3, rng=rng)
        seqs = rng.normal(size=(3, 4, 2))
        hs_b, _, _ = layer.forward(seqs)
        for k in range(3):
            hs, _, _ = layer.forward(seqs[k])
            npt.assert_allclose(hs_b[k], hs, atol=1e-15)

    def test_backward_without_forward(self):
        with pytest.raises(MissingCacheError):
            LSTM(2, 2).backward(np.zeros((3, 2)))


class TestBiLSTM:
    def test_output_is_concatenation(self):
        rng = np.random.default_rng(5)
        bi = BiLSTM(2, 3, rng=rng)
        seq = rng.normal(size=(4, 2))
        outs, summary = bi.forward(seq)
        assert outs.shape == (4, 6)
        hf, hTf, _ = bi.fwd.forward(seq)
        hb, hTb, _ = bi.bwd.forward(seq[::-1])
        npt.assert_array_equal(outs[:, :3], hf)
        npt.assert_array_equal(outs[:, 3:], hb[::-1])
        npt.assert_array_equal(summary, np.concatenate([hTf, hTb]))
        npt.assert_array_equal(summary[3:], outs[0, 3:])


class TestGradients:
    @pytest.mark.parametrize("act", ["identity", "relu", "tanh"])
    def test_dense(self, act):
        rng = np.random.default_rng(13)
        layer = Dense(3, 4, activation=act, l2=0.1, rng=rng)
        layer.params["b"][...] = rng.normal(scale=0.3, size=4)
        frag = LayerFragment(layer, rng.normal(size=(5, 3)), "dense")
        assert grad_check(frag, seed=13) < 1e-5

    def test_dense_identity_fragment(self):
        layer = Dense(3, 3, activation="identity")
        layer.params["W"][...] = np.eye(3)
        frag = LayerFragment(layer, np.random.default_rng(13).normal(size=(2, 3)), "dense")
        assert grad_check(frag, seed=13) < 1e-7

    def test_lstm(self):
        rng = np.random.default_rng(13)
        layer = LSTM(2, 3, l2=0.05, rng=rng)
        layer.params["b"][...] = rng.normal(scale=0.3, size=12)
        frag = LayerFragment(layer, rng.normal(size=(2, 5, 2)), "lstm")
        assert grad_check(frag, seed=13) < 1e-5

    @pytest.mark.parametrize("batched", [False, True])
    def test_bilstm(self, batched):
        rng = np.random.default_rng(13)
        layer = BiLSTM(2, 3, l2=0.05, rng=rng)
        x = rng.normal(size=(3, 4, 2) if batched else (4, 2))
        frag = LayerFragment(layer, x, "bilstm")
        assert grad_check(frag, seed=13) < 1e-5

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**16), units=st.integers(1, 4), T=st.integers(1, 6))
    def test_lstm_random_seeds(self, seed, units, T):
        rng = np.random.default_rng(seed)
        layer = LSTM(2, units, rng=rng)
        frag = LayerFragment(layer, rng.normal(size=(2, T, 2)), "lstm")
        assert grad_check(frag, seed=seed) < 1e-5


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = Adam(lr=0.1)
        opt.step(p, {"w": np.zeros(2)})
        npt.assert_array_equal(p["w"], [1.0, -2.0])
        assert not opt.m["w"].any() and not opt.v["w"].any()

    def test_first_step_is_lr(self):
        p = {"w": np.array([0.0])}
        Adam(lr=0.001).step(p, {"w": np.array([1.0])})
        assert p["w"][0] == pytest.approx(-0.001, rel=1e-7)

    def test_matches_reference_trajectory(self):
        grads = [np.array([0.3, -1.2]), np.array([0.1, 0.4]), np.array([-0.7, 2.0])]
        p = {"w": np.array([0.5, -0.5])}
        opt = Adam(lr=0.01)
        # scalar reference implementation
        ref = [0.5, -0.5]
        m = [0.0, 0.0]
        v = [0.0, 0.0]
        for t, g in enumerate(grads, start=1):
            opt.step(p, {"w": g})
            for j in range(2):
                m[j] = 0.9 * m[j] + 0.1 * g[j]
                v[j] = 0.999 * v[j] + 0.001 * g[j] ** 2
                mh = m[j] / (1 - 0.9 ** t)
                vh = v[j] / (1 - 0.999 ** t)
                ref[j] -= 0.01 * mh / (math.sqrt(vh) + 1e-8)
        npt.assert_allclose(p["w"], ref, atol=1e-12, rtol=0)
        assert opt.step_count == 3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})


class TestMSE:
    def test_equal(self):
        loss, grad = mse_loss(np.ones(3), np.ones(3))
        assert loss == 0 and not grad.any()

    def test_hand_case(self):
        loss, grad = mse_loss(np.array([1.0, 3.0]), np.array([1.0, 1.0]))
        assert loss == 2.0
        npt.assert_array_equal(grad, [0.0, 2.0])

    def test_loop_oracle(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        acc = 0.0
        for i in range(4):
            for j in range(3):
                acc += (a[i, j] - b[i, j]) ** 2
        loss, _ = mse_loss(a, b)
        assert loss == pytest.approx(acc / 12, abs=1e-15)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros(2), np.zeros(3))

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            mse_loss(np.array([np.inf]), np.array([0.0]))


def test_determinism():
    def run():
        rng = np.random.default_rng(99)
        bi = BiLSTM(3, 4, rng=rng)
        return bi.forward(rng.normal(size=(2, 6, 3)))[1]
    assert run().tobytes() == run().tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bounded_params_stay_finite(seed):
    rng = np.random.default_rng(seed)
    layer = LSTM(3, 2, rng=rng)
    for v in layer.params.values():
        v[...] = rng.uniform(-10, 10, size=v.shape)
    hs, _, _ = layer.forward(rng.uniform(-10, 10, size=(7, 3)))
    assert np.all(np.isfinite(hs))
    layer.backward(np.ones_like(hs))
    assert all(np.all(np.isfinite(g)) for g in layer.grads.values())
