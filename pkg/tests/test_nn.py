import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoaction.nn import (LSTM, activation_pattern, CheckpointError, Conv2D, Dense, Flatten, LstmParams, MaxPool2D,
                          ReLU, ShapeError, check_layer, checkpoint_hash, grad_check,
                          load_checkpoint, lstm_cell, relative_error, save_checkpoint, sigmoid,
                          softmax, softmax_cross_entropy)

from . import oracles

f64 = np.float64


def rng(seed=0):
    return np.random.default_rng(seed)


# -- forward against loop oracles ------------------------------------------------

@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (2, 2, 0)])
def test_conv_matches_oracle(k, stride, pad):
    conv = Conv2D("c", 2, 3, k, stride, pad, rng=rng(1), dtype=f64)
    conv.b.value[:] = rng(2).normal(size=3)
    x = rng(3).normal(size=(2, 2, 7, 6))
    ref = oracles.conv2d(x, conv.W.value, conv.b.value, stride, pad)
    np.testing.assert_allclose(conv.forward(x), ref, atol=1e-12)


def test_identity_1x1_conv():
    conv = Conv2D("c", 3, 3, 1, dtype=f64)
    conv.W.value[:] = np.eye(3)[:, :, None, None]
    x = rng(4).normal(size=(2, 3, 5, 5))
    np.testing.assert_array_equal(conv.forward(x), x)


def test_maxpool_matches_oracle_and_drops_ragged_edge():
    x = rng(5).normal(size=(2, 3, 7, 9))
    out = MaxPool2D(2).forward(x)
    assert out.shape == (2, 3, 3, 4)
    np.testing.assert_array_equal(out, oracles.maxpool(x, 2))


def test_relu_backward_zero_at_negative():
    x = np.array([-2.0, -0.1, 0.0, 0.3, 4.0])
    r = ReLU()
    np.testing.assert_array_equal(r.forward(x), [0, 0, 0, 0.3, 4.0])
    np.testing.assert_array_equal(r.backward(np.ones(5)), [0, 0, 0, 1, 1])


def test_sigmoid_stable_at_extremes():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_shape_errors():
    with pytest.raises(ShapeError):
        Conv2D("c", 3, 4).forward(np.zeros((1, 2, 5, 5), np.float32))
    with pytest.raises(ShapeError):
        Dense("d", 4, 2).forward(np.zeros((3, 5), np.float32))
    p = LstmParams("l", 3, 2)
    with pytest.raises(ShapeError):
        lstm_cell(np.zeros(4), np.zeros(2), np.zeros(2), p)


# -- LSTM cell ------------------------------------------------------------------------

def test_lstm_cell_matches_scalar_oracle():
    p = LstmParams("l", 4, 3, rng(6), f64)
    p.b.value[:] = rng(7).normal(size=12)
    x, h, c = rng(8).normal(size=4), rng(9).normal(size=3), rng(10).normal(size=3)
    h2, c2, _ = lstm_cell(x, h, c, p)
    rh, rc = oracles.lstm_cell(x, h, c, p.W.value, p.U.value, p.b.value)
    np.testing.assert_allclose(h2, rh, atol=1e-14)
    np.testing.assert_allclose(c2, rc, atol=1e-14)


def test_lstm_cell_zero_state():
    p = LstmParams("l", 4, 3, rng(11), f64)
    p.b.value[:] = 0
    h2, c2, _ = lstm_cell(np.zeros(4), np.zeros(3), np.zeros(3), p)
    assert not h2.any() and not c2.any()


def test_lstm_cell_saturated_gates_keep_cell():
    p = LstmParams("l", 2, 3, rng(12), f64)
    p.W.value[:] = 0
    p.U.value[:] = 0
    p.b.value[:] = 0
    p.gate(p.b.value, "f")[:] = 1000  # forget gate -> 1
    p.gate(p.b.value, "i")[:] = -1000  # input gate -> 0
    c = np.array([0.3, -1.2, 2.5])
    _, c2, _ = lstm_cell(rng(13).normal(size=2), rng(14).normal(size=3), c, p)
    np.testing.assert_array_equal(c2, c)


def test_forget_bias_initialised_to_one():
    p = LstmParams("l", 2, 3)
    np.testing.assert_array_equal(p.gate(p.b.value, "f"), 1.0)
    np.testing.assert_array_equal(p.gate(p.b.value, "i"), 0.0)


# -- softmax / loss -------------------------------------------------------------------

def test_uniform_logits_loss_ln4():
    loss, g = softmax_cross_entropy(np.zeros(4), 2)
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    np.testing.assert_allclose(g, [0.25, 0.25, -0.75, 0.25])


@given(st.floats(-500, 500), st.integers(0, 2 ** 16))
@settings(max_examples=50, deadline=None)
def test_loss_shift_invariance(shift, seed):
    z = np.random.default_rng(seed).normal(0, 3, (3, 5))
    labels = [0, 4, 2]
    a = softmax_cross_entropy(z, labels)
    b = softmax_cross_entropy(z + shift, labels)
    assert a[0] == pytest.approx(b[0], abs=1e-9)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


@given(st.integers(0, 2 ** 16), st.integers(2, 9))
@settings(max_examples=50, deadline=None)
def test_softmax_normalised(seed, L):
    p = softmax(np.random.default_rng(seed).normal(0, 30, (4, L)))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p >= 0).all()


def test_loss_errors():
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.zeros(1), 0)
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), 3)


# -- gradient checks ------------------------------------------------------------------

def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, -1e-12) == pytest.approx(2e-6)
    assert relative_error(1.0, 1.0 + 1e-8) < 1e-8


def test_dense_gradcheck_tight():
    layer = Dense("d", 5, 4, rng(20), f64)
    assert check_layer(layer, rng(21).normal(size=(3, 5))) < 1e-7


@pytest.mark.parametrize("make,shape", [
    (lambda: Conv2D("c", 2, 3, 3, 1, rng=rng(22), dtype=f64), (2, 2, 6, 5)),
    (lambda: Conv2D("c", 2, 3, 3, 2, rng=rng(23), dtype=f64), (2, 2, 7, 7)),
    (lambda: Conv2D("c", 1, 2, 2, 2, 0, rng=rng(24), dtype=f64), (1, 1, 6, 6)),
    (lambda: MaxPool2D(2), (2, 2, 6, 5)),
    (lambda: ReLU(), (3, 7)),
    (lambda: Flatten(), (2, 3, 2, 2)),
    (lambda: LSTM("l", 4, 3, rng(25), f64), (2, 5, 4)),
])
def test_layer_gradcheck(make, shape):
    x = rng(26).normal(size=shape)
    if isinstance(make(), ReLU):
        x[np.abs(x) < 1e-3] = 0.5  # keep probes away from the kink
    assert check_layer(make(), x) < 1e-4


def test_softmax_cross_entropy_gradcheck():
    z = rng(27).normal(size=(4, 6))
    labels = [0, 5, 2, 2]
    _, g = softmax_cross_entropy(z, labels)
    assert grad_check(lambda: softmax_cross_entropy(z, labels)[0], [z], [g]) < 1e-4


class BrokenDense(Dense):
    """Backward off by a factor on the weights: the check must notice."""

    def backward(self, dout):
        dx = super().backward(dout)
        self.W.grad *= 1.1
        return dx


def test_gradcheck_detects_corrupted_backward():
    layer = BrokenDense("d", 5, 4, rng(28), f64)
    assert check_layer(layer, rng(29).normal(size=(3, 5))) > 1e-2


def test_probe_across_kink_is_skipped():
    relu = ReLU()
    x = np.array([0.0, 1.0])

    def loss():
        return float(relu.forward(x).sum())
    g = np.array([0.0, 1.0])  # the analytic derivative at 0 is taken as 0
    assert grad_check(loss, [x], [g]) == pytest.approx(1.0)
    rep = {}
    assert grad_check(loss, [x], [g], pattern=lambda: activation_pattern([relu]),
                      report=rep) < 1e-9
    assert rep == {"probed": 1, "skipped": 1}


def test_forward_backward_deterministic():
    outs = []
    for _ in range(2):
        conv = Conv2D("c", 2, 3, rng=rng(30))
        x = rng(31).normal(size=(2, 2, 8, 8)).astype(np.float32)
        y = conv.forward(x)
        dx = conv.backward(np.ones_like(y))
        outs.append((y, dx, conv.W.grad.copy()))
    for a, b in zip(*outs):
        np.testing.assert_array_equal(a, b)


# -- checkpoints -----------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    params = {"b.W": rng(32).normal(size=(3, 4)).astype(np.float32),
              "a.b": np.arange(5, dtype=np.float32)}
    digest = save_checkpoint(tmp_path / "ck", params, {"step": 7})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"step": 7}
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert checkpoint_hash(tmp_path / "ck") == digest
    assert save_checkpoint(tmp_path / "ck2", params) == digest


def test_checkpoint_hash_mismatch(tmp_path):
    save_checkpoint(tmp_path / "ck", {"w": np.ones(3, np.float32)})
    raw = bytearray((tmp_path / "ck.bin").read_bytes())
    raw[0] ^= 1
    (tmp_path / "ck.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
