import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoaction.model import (EncoderConfig, ModelConfig, SpliceClassifier, TwoStreamModel,
                             fuse_steps, fuse_streams, grad_cam)
from egoaction.nn import ShapeError, softmax

from .helpers import model_gradcheck, tiny_model


def splice(model, n=None, seed=0):
    c = model.cfg
    shape = (c.W, c.encoder.in_channels, c.encoder.input_size, c.encoder.input_size)
    return np.random.default_rng(seed).normal(size=shape if n is None else (n,) + shape)


def test_full_model_gradcheck():
    assert model_gradcheck(tiny_model(W=3)) < 1e-4


def test_tied_encoder_gradient_is_sum_over_positions():
    model = tiny_model(W=3)
    x = splice(model, n=2)
    model.zero_grad()
    out = model.forward(x)
    dlogits = np.random.default_rng(1).normal(size=out["logits"].shape)
    model.backward_logits(dlogits)
    tied = {p.name: p.grad.copy() for p in model.encoder.parameters()}
    # replay with one untied encoder application per position
    model.zero_grad()
    model.forward(x)
    dfeats = model.backward_logits(dlogits, through_encoder=False)
    for p in model.encoder.parameters():
        p.zero_grad()
    summed = {k: 0.0 for k in tied}
    for w in range(model.cfg.W):
        model.encoder.forward(x[:, w])
        model.encoder.backward(dfeats[:, w])
        for p in model.encoder.parameters():
            summed[p.name] = summed[p.name] + p.grad
            p.zero_grad()
    for k in tied:
        np.testing.assert_allclose(tied[k], summed[k], atol=1e-12)


def test_identical_frames_identical_features():
    model = tiny_model()
    f = splice(model)[0]
    feats = model.encode(np.stack([f, f]))
    np.testing.assert_array_equal(feats[0], feats[1])


def test_zero_head_gives_uniform():
    model = tiny_model(L=5)
    model.head.W.value[:] = 0
    model.head.b.value[:] = 0
    out = model.forward_splice(splice(model))
    np.testing.assert_allclose(out["per_step_probs"], 0.2, atol=1e-12)
    np.testing.assert_allclose(out["fused_probs"], 0.2, atol=1e-12)


def test_w1_is_plain_chain():
    model = tiny_model(W=1)
    x = splice(model)
    got = model.forward_splice(x)["fused_probs"]
    h = model.lstm.forward(model.encode(x)[None])
    ref = softmax(model.head.forward(h))[0, 0]
    np.testing.assert_allclose(got, ref, atol=1e-14)
    np.testing.assert_array_equal(model.step_distribution(), [1.0])


def test_step_weights_start_uniform():
    np.testing.assert_allclose(tiny_model(W=5).step_distribution(), 0.2)


@given(st.integers(0, 2 ** 16))
@settings(max_examples=15, deadline=None)
def test_probabilities_normalised(seed):
    model = tiny_model(W=3, seed=seed % 7)
    model.step_weights.value[:] = np.random.default_rng(seed).normal(0, 2, 3)
    out = model.forward(splice(model, n=3, seed=seed))
    np.testing.assert_allclose(out["per_step_probs"].sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out["fused_probs"].sum(-1), 1.0, atol=1e-6)


def test_fuse_steps_examples():
    p = np.random.default_rng(2).dirichlet(np.ones(4), 5)
    np.testing.assert_allclose(fuse_steps(p, np.full(5, 0.2)), p.mean(axis=0), atol=1e-15)
    np.testing.assert_array_equal(fuse_steps(p, np.eye(5)[3]), p[3])
    with pytest.raises(ValueError):
        fuse_steps(p, np.full(5, 0.3))


def test_fuse_streams_examples():
    a, b = np.eye(4)[1], np.eye(4)[2]
    np.testing.assert_array_equal(fuse_streams(a, a), a)
    np.testing.assert_array_equal(fuse_streams(a, b), [0, 0.5, 0.5, 0])
    np.testing.assert_array_equal(fuse_streams(a, b, "weighted", 1.0), a)
    with pytest.raises(ValueError):
        fuse_streams(a, b, "max")
    with pytest.raises(ValueError):
        fuse_streams(a, np.eye(3)[0])


def test_two_stream_requires_matching_streams():
    with pytest.raises(ValueError):
        TwoStreamModel(tiny_model(W=3), tiny_model(W=5))
    ts = TwoStreamModel(tiny_model(seed=1), tiny_model(seed=2))
    x = splice(ts.rgb_stream, n=2)
    np.testing.assert_allclose(ts.predict(x, x).sum(-1), 1.0, atol=1e-12)


def test_shape_errors():
    model = tiny_model(W=3)
    with pytest.raises(ShapeError):
        model.forward(splice(tiny_model(W=5), n=1))
    with pytest.raises(ShapeError):
        model.encode(np.zeros((2, 3, 8, 8)))
    with pytest.raises(ShapeError):
        SpliceClassifier(ModelConfig(EncoderConfig(input_size=4), W=3))


def test_grad_cam_shape_and_range():
    model = SpliceClassifier(ModelConfig(W=3, num_classes=6), np.float64)
    x = np.random.default_rng(3).normal(size=(3, 3, 48, 48))
    cam = grad_cam(model, x, 1, 2)
    assert cam.shape == (12, 12)
    assert cam.min() >= 0 and cam.max() <= 1
    assert cam.max() in (0.0, 1.0)
    assert not any(p.grad.any() for p in model.parameters())
    with pytest.raises(IndexError):
        grad_cam(model, x, 3, 0)
    with pytest.raises(IndexError):
        grad_cam(model, x, 0, 6)


def test_checkpoint_roundtrip_preserves_outputs(tmp_path):
    model = tiny_model(dtype=np.float32)
    model.save(tmp_path / "m", note="x")
    back, meta = SpliceClassifier.load(tmp_path / "m")
    assert meta["note"] == "x"
    x = splice(model, n=2)
    np.testing.assert_array_equal(model.forward(x)["fused_probs"], back.forward(x)["fused_probs"])
