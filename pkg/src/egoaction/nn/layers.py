"""Layers with hand-written backward passes.

Every layer caches what it needs in ``forward`` and, in ``backward``,
returns the input gradient and *accumulates* parameter gradients into
``Parameter.grad`` (call ``zero_grad`` between steps).  Applying one layer to
a batch that stacks all W frames of a splice is what ties the encoder
weights: the per-position gradient contributions are summed for free.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def _expect(shape, expected, what):
    if tuple(shape) != tuple(expected):
        raise ShapeError(f"{what}: expected shape {tuple(expected)}, got {tuple(shape)}")


class Parameter:
    def __init__(self, name: str, value):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Layer:
    def parameters(self) -> list[Parameter]:
        return []


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def orthogonal(rng, n, dtype):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


class Conv2D(Layer):
    def __init__(self, name, in_ch, out_ch, kernel=3, stride=1, pad=None, rng=None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.k, self.stride = kernel, stride
        self.pad = kernel // 2 if pad is None else pad
        self.in_ch, self.out_ch = in_ch, out_ch
        fan_in = in_ch * kernel * kernel
        self.W = Parameter(f"{name}.W", kaiming_uniform(
            rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype))
        self.b = Parameter(f"{name}.b", np.zeros(out_ch, dtype=dtype))

    def parameters(self):
        return [self.W, self.b]

    def out_size(self, h, w):
        return ((h + 2 * self.pad - self.k) // self.stride + 1,
                (w + 2 * self.pad - self.k) // self.stride + 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv input: expected (N, {self.in_ch}, H, W), got {x.shape}")
        N, C, H, W = x.shape
        p, k, s = self.pad, self.k, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        Ho, Wo = self.out_size(H, W)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
        out = cols @ self.W.value.reshape(self.out_ch, -1).T + self.b.value
        self._cache = (x.shape, xp.shape, cols, Ho, Wo)
        return out.reshape(N, Ho, Wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        xshape, xpshape, cols, Ho, Wo = self._cache
        N, C, H, W = xshape
        k, s, p = self.k, self.stride, self.pad
        d = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        self.W.grad += (d.T @ cols).reshape(self.W.value.shape)
        self.b.grad += d.sum(axis=0)
        dcols = (d @ self.W.value.reshape(self.out_ch, -1)).reshape(N, Ho, Wo, C, k, k)
        dxp = np.zeros(xpshape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + H, p:p + W] if p else dxp


class MaxPool2D(Layer):
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a window are dropped."""

    def __init__(self, k=2):
        self.k = k

    def forward(self, x):
        N, C, H, W = x.shape
        k = self.k
        Ho, Wo = H // k, W // k
        xc = x[:, :, :Ho * k, :Wo * k].reshape(N, C, Ho, k, Wo, k)
        xw = xc.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, k * k)
        arg = xw.argmax(axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(xw, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        (N, C, H, W), arg = self._cache
        k = self.k
        Ho, Wo = dout.shape[2:]
        dw = np.zeros((N, C, Ho, Wo, k * k), dtype=dout.dtype)
        np.put_along_axis(dw, arg[..., None], dout[..., None], axis=-1)
        dx = np.zeros((N, C, H, W), dtype=dout.dtype)
        dx[:, :, :Ho * k, :Wo * k] = dw.reshape(N, C, Ho, Wo, k, k).transpose(
            0, 1, 2, 4, 3, 5).reshape(N, C, Ho * k, Wo * k)
        return dx


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(len(x), -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    def __init__(self, name, n_in, n_out, rng=None, dtype=np.float32, zero=False):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        W = np.zeros((n_out, n_in), dtype) if zero else kaiming_uniform(
            rng, (n_out, n_in), n_in, dtype)
        self.W = Parameter(f"{name}.W", W)
        self.b = Parameter(f"{name}.b", np.zeros(n_out, dtype=dtype))

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"dense input: expected last dim {self.n_in}, got {x.shape}")
        self._x = x
        return x @ self.W.value.T + self.b.value

    def backward(self, dout):
        x = self._x.reshape(-1, self.n_in)
        d = dout.reshape(-1, self.n_out)
        self.W.grad += d.T @ x
        self.b.grad += d.sum(axis=0)
        return dout @ self.W.value


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class LstmParams:
    """Gate weights stacked in the order input, forget, output, candidate."""

    GATES = ("i", "f", "o", "g")

    def __init__(self, name, input_dim, hidden_dim, rng=None, dtype=np.float32,
                 forget_bias=1.0):
        rng = rng or np.random.default_rng(0)
        D, Hc = input_dim, hidden_dim
        self.D, self.Hc = D, Hc
        bound = np.sqrt(6.0 / (D + Hc))
        self.W = Parameter(f"{name}.W", rng.uniform(-bound, bound, (4 * Hc, D)).astype(dtype))
        self.U = Parameter(f"{name}.U", np.concatenate(
            [orthogonal(rng, Hc, dtype) for _ in range(4)], axis=0))
        b = np.zeros(4 * Hc, dtype=dtype)
        b[Hc:2 * Hc] = forget_bias
        self.b = Parameter(f"{name}.b", b)

    def parameters(self):
        return [self.W, self.U, self.b]

    def gate(self, arr, g):
        k = self.GATES.index(g)
        return arr[..., k * self.Hc:(k + 1) * self.Hc]


def lstm_cell(x, h, c, p: LstmParams):
    """One step; returns (h', c', cache)."""
    _expect(x.shape[-1:], (p.D,), "lstm input")
    _expect(h.shape[-1:], (p.Hc,), "lstm hidden state")
    _expect(c.shape, h.shape, "lstm cell state")
    Hc = p.Hc
    z = x @ p.W.value.T + h @ p.U.value.T + p.b.value
    i = sigmoid(z[..., :Hc])
    f = sigmoid(z[..., Hc:2 * Hc])
    o = sigmoid(z[..., 2 * Hc:3 * Hc])
    g = np.tanh(z[..., 3 * Hc:])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    return h2, c2, (x, h, c, i, f, o, g, tc)


def lstm_cell_backward(dh2, dc2, cache, p: LstmParams):
    """Returns (dx, dh, dc); accumulates into p's gradients."""
    x, h, c, i, f, o, g, tc = cache
    do = dh2 * tc
    dc = dc2 + dh2 * o * (1 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c
    dc_prev = dc * f
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o),
                         dg * (1 - g * g)], axis=-1)
    p.W.grad += dz.T @ x
    p.U.grad += dz.T @ h
    p.b.grad += dz.sum(axis=0)
    return dz @ p.W.value, dz @ p.U.value, dc_prev


class LSTM(Layer):
    """Single layer, unidirectional, unrolled over the sequence axis; h0 = c0 = 0."""

    def __init__(self, name, input_dim, hidden_dim, rng=None, dtype=np.float32):
        self.p = LstmParams(name, input_dim, hidden_dim, rng, dtype)

    def parameters(self):
        return self.p.parameters()

    def forward(self, x):
        N, T, _ = x.shape
        h = np.zeros((N, self.p.Hc), dtype=x.dtype)
        c = np.zeros_like(h)
        hs, self._caches = [], []
        for t in range(T):
            h, c, cache = lstm_cell(x[:, t], h, c, self.p)
            hs.append(h)
            self._caches.append(cache)
        return np.stack(hs, axis=1)

    def backward(self, dhs):
        N, T, _ = dhs.shape
        dx = np.zeros((N, T, self.p.D), dtype=dhs.dtype)
        dh = np.zeros((N, self.p.Hc), dtype=dhs.dtype)
        dc = np.zeros_like(dh)
        for t in range(T - 1, -1, -1):
            dx[:, t], dh, dc = lstm_cell_backward(dhs[:, t] + dh, dc, self._caches[t], self.p)
        return dx


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, dp, axis=-1):
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dlogits).

    ``logits`` may be a single (L,) vector with an integer label.
    """
    single = np.ndim(logits) == 1
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    L = logits.shape[-1]
    if L < 2:
        raise ShapeError(f"need at least 2 classes, got {L}")
    if np.any(labels < 0) or np.any(labels >= L):
        raise ValueError(f"label out of range for {L} classes: {labels}")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    n = len(logits)
    loss = float((lse - z[np.arange(n), labels]).mean())
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, (grad[0] if single else grad)
