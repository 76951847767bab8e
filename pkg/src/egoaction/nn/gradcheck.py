"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .layers import MaxPool2D, ReLU


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a| + |n|, floor); the floor keeps near-zero coordinates from
    reporting pure round-off as relative error."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def grad_check(loss_fn, arrays, grads, eps=1e-5, max_coords=40, seed=0, pattern=None,
               report=None):
    """Worst relative error between ``grads`` and central differences.

    ``loss_fn()`` evaluates the scalar loss from the current contents of
    ``arrays`` (which are perturbed in place and restored).  ``grads`` are
    the analytic gradients at the unperturbed point.  At most ``max_coords``
    random coordinates per array are probed.

    ``pattern()``, if given, returns the activation pattern (ReLU masks, pool
    winners) of the latest ``loss_fn()`` call.  A probe whose +-eps interval
    changes the pattern straddles a kink, where the central difference is not
    a derivative; such probes are skipped and counted in ``report``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    base = None
    if pattern is not None:
        loss_fn()
        base = pattern()
    probed = skipped = 0
    for arr, g in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn()
            kink = base is not None and not np.array_equal(pattern(), base)
            flat[i] = old - eps
            fm = loss_fn()
            kink = kink or (base is not None and not np.array_equal(pattern(), base))
            flat[i] = old
            if kink:
                skipped += 1
                continue
            probed += 1
            num = (fp - fm) / (2 * eps)
            worst = max(worst, float(relative_error(gflat[i], num)))
    if report is not None:
        report.update(probed=probed, skipped=skipped)
    return worst


def activation_pattern(layers):
    """Concatenated ReLU masks and max-pool winners from the layers' last forward."""
    parts = []
    for layer in layers:
        if isinstance(layer, ReLU):
            parts.append(layer._mask.ravel())
        elif isinstance(layer, MaxPool2D):
            parts.append(np.asarray(layer._cache[1]).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def check_layer(layer, x, eps=1e-5, max_coords=40, seed=0):
    """Gradient check of a layer under the loss sum(layer(x) * R), R random.

    Checks the input gradient and every parameter gradient; returns the
    worst relative error.
    """
    rng = np.random.default_rng(seed + 1)
    out = layer.forward(x)
    R = rng.standard_normal(out.shape)
    for p in layer.parameters():
        p.zero_grad()
    dx = layer.backward(R.astype(out.dtype))
    params = layer.parameters()
    grads = [dx] + [p.grad.copy() for p in params]
    arrays = [x] + [p.value for p in params]

    def loss():
        return float(np.sum(layer.forward(x) * R))

    return grad_check(loss, arrays, grads, eps=eps, max_coords=max_coords, seed=seed)
