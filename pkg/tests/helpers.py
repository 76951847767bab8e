"""Shared fixtures-as-functions for the test modules."""
import numpy as np

from egoaction.model import EncoderConfig, ModelConfig, SpliceClassifier, splice_nll
from egoaction.nn import activation_pattern, grad_check


def tiny_model(W=3, L=4, seed=0, dtype=np.float64):
    enc = EncoderConfig(in_channels=2, input_size=8, blocks=((3, 3, 1, 2), (4, 3, 1, 2)),
                        feature_dim=5)
    return SpliceClassifier(ModelConfig(enc, W=W, num_classes=L, hidden=4, seed=seed), dtype)


def model_gradcheck(model, n=2, seed=0, max_coords=25, report=None):
    """Worst relative error of every parameter gradient of the splice loss.

    Probes that cross a ReLU or pooling kink are skipped (counted in ``report``).
    """
    rng = np.random.default_rng(seed)
    c = model.cfg
    x = rng.normal(size=(n, c.W, c.encoder.in_channels, c.encoder.input_size,
                         c.encoder.input_size))
    y = rng.integers(0, c.num_classes, n)
    model.step_weights.value[:] = rng.normal(0, 0.5, c.W)
    model.head.b.value[:] = rng.normal(0, 0.5, c.num_classes)

    def loss():
        return splice_nll(model.forward(x)["fused_probs"], y)[0]

    model.zero_grad()
    _, dfused = splice_nll(model.forward(x)["fused_probs"], y)
    model.backward_fused(dfused)
    params = model.parameters()
    return grad_check(loss, [p.value for p in params], [p.grad.copy() for p in params],
                      max_coords=max_coords, seed=seed,
                      pattern=lambda: activation_pattern(model.encoder.layers), report=report)
