"""Two-stream CNN-LSTM splice classifier.

Each stream encodes the W frames of a splice with one shared (tied) encoder,
runs a single unidirectional LSTM layer over the W features, classifies
every step with a linear head and averages the W per-step posteriors with
learned step weights (a softmax over W scalars, initialised uniform).  The
RGB and flow streams are trained separately and fused late.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import layers as nl
from .nn.checkpoint import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    input_size: int = 48
    # (filters, kernel, stride, pool) per conv-ReLU-pool block
    blocks: tuple = ((8, 3, 1, 2), (16, 3, 1, 2), (16, 3, 1, 2))
    feature_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in self.blocks))


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    W: int = 11
    num_classes: int = 6
    hidden: int = 64
    seed: int = 0

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


class Encoder:
    """conv-ReLU-pool blocks, flatten, dense to the feature size, ReLU."""

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.layers = []
        ch, size = cfg.in_channels, cfg.input_size
        for i, (filters, k, stride, pool) in enumerate(cfg.blocks):
            conv = nl.Conv2D(f"encoder.conv{i}", ch, filters, k, stride, rng=rng, dtype=dtype)
            self.layers += [conv, nl.ReLU(), nl.MaxPool2D(pool)]
            size = conv.out_size(size, size)[0]
            self.cam_shape = (size, size)
            self.cam_index = len(self.layers) - 2  # output of the last conv's ReLU
            size //= pool
            ch = filters
        flat = ch * size * size
        if flat < 1:
            raise nl.ShapeError(f"input size {cfg.input_size} too small for {len(cfg.blocks)} blocks")
        self.layers += [nl.Flatten(), nl.Dense("encoder.fc", flat, cfg.feature_dim, rng, dtype),
                        nl.ReLU()]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x, keep=None):
        """``keep``: layer index whose output to return as a second value."""
        c = self.cfg
        expect = (c.in_channels, c.input_size, c.input_size)
        if x.shape[1:] != expect:
            raise nl.ShapeError(f"encoder input: expected (N, {expect}), got {x.shape}")
        kept = None
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i == keep:
                kept = x
        return (x, kept) if keep is not None else x

    def backward(self, dout, stop_at=None):
        """Backpropagate; with ``stop_at`` return the gradient w.r.t. that layer's output."""
        for i in range(len(self.layers) - 1, -1, -1):
            if i == stop_at:
                return dout
            dout = self.layers[i].backward(dout)
        return dout


def fuse_steps(per_step_probs, weights):
    """Weighted average over the step axis: (..., W, L) x (W,) -> (..., L)."""
    w = np.asarray(weights)
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-6:
        raise ValueError(f"step weights must be a probability vector, got {w}")
    return np.einsum("...wl,w->...l", per_step_probs, w)


def fuse_streams(rgb, flow, mode: str = "mean", lam: float = 0.5):
    rgb, flow = np.asarray(rgb), np.asarray(flow)
    if rgb.shape != flow.shape:
        raise ValueError(f"stream outputs differ in shape: {rgb.shape} vs {flow.shape}")
    if mode == "mean":
        return 0.5 * (rgb + flow)
    if mode == "weighted":
        return lam * rgb + (1.0 - lam) * flow
    raise ValueError(f"unknown fusion mode {mode!r}")


class SpliceClassifier:
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        D, L = cfg.encoder.feature_dim, cfg.num_classes
        self.encoder = Encoder(cfg.encoder, rng, dtype)
        self.frame_head = nl.Dense("frame_head", D, L, rng, dtype)
        self.lstm = nl.LSTM("lstm", D, cfg.hidden, rng, dtype)
        self.head = nl.Dense("head", cfg.hidden, L, rng, dtype)
        self.step_weights = nl.Parameter("step_weights", np.zeros(cfg.W, dtype=dtype))

    # -- parameters ---------------------------------------------------------
    def parameters(self):
        return (self.encoder.parameters() + self.frame_head.parameters()
                + self.lstm.parameters() + self.head.parameters() + [self.step_weights])

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.step_weights.value.dtype

    @property
    def L(self):
        return self.cfg.num_classes

    def state_dict(self):
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        if set(state) != set(params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, v in state.items():
            nl._expect(v.shape, params[k].value.shape, k)
            params[k].value = np.asarray(v, dtype=params[k].value.dtype).copy()
            params[k].grad = np.zeros_like(params[k].value)

    def save(self, path, **meta) -> str:
        return save_checkpoint(path, self.state_dict(), {"model": self.cfg.to_json(), **meta})

    @classmethod
    def load(cls, path, dtype=np.float32):
        state, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_json(meta["model"]), dtype)
        model.load_state_dict(state)
        return model, meta

    # -- forward ------------------------------------------------------------
    def encode(self, frames):
        """(N, C, S, S) frames -> (N, D) features."""
        return self.encoder.forward(np.asarray(frames, dtype=self.dtype))

    def step_distribution(self):
        return nl.softmax(self.step_weights.value)

    def forward_features(self, feats):
        """Recurrent part on precomputed features (N, W, D)."""
        N, W, _ = feats.shape
        if W != self.cfg.W:
            raise nl.ShapeError(f"splice length: expected {self.cfg.W}, got {W}")
        hs = self.lstm.forward(feats)
        logits = self.head.forward(hs)
        probs = nl.softmax(logits)
        w = self.step_distribution()
        fused = fuse_steps(probs, w)
        self._fcache = (probs, w)
        return {"logits": logits, "per_step_probs": probs, "fused_probs": fused}

    def forward(self, x):
        """(N, W, C, S, S) splices -> dict with logits, per_step_probs (N, W, L), fused_probs (N, L)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 5 or x.shape[1] != self.cfg.W:
            raise nl.ShapeError(f"splice batch: expected (N, {self.cfg.W}, C, S, S), got {x.shape}")
        N, W = x.shape[:2]
        feats = self.encoder.forward(x.reshape((N * W,) + x.shape[2:])).reshape(N, W, -1)
        self._nw = (N, W)
        return self.forward_features(feats)

    def forward_splice(self, splice_frames):
        """Single splice (W, C, S, S) -> per_step_probs (W, L), fused_probs (L,)."""
        out = self.forward(np.asarray(splice_frames)[None])
        return {k: v[0] for k, v in out.items()}

    # -- backward -----------------------------------------------------------
    def backward_logits(self, dlogits, through_encoder=True):
        """Gradient of the per-step logits (N, W, L) into all parameters.

        Returns the feature gradient (N, W, D).
        """
        dhs = self.head.backward(dlogits)
        dfeats = self.lstm.backward(dhs)
        if through_encoder:
            N, W, D = dfeats.shape
            self.encoder.backward(dfeats.reshape(N * W, D))
        return dfeats

    def backward_fused(self, dfused, through_encoder=True):
        probs, w = self._fcache
        dprobs = dfused[:, None, :] * w[None, :, None]
        dw = np.einsum("nwl,nl->w", probs, dfused)
        self.step_weights.grad += nl.softmax_backward(w, dw)
        dlogits = nl.softmax_backward(probs, dprobs)
        return self.backward_logits(dlogits, through_encoder)

    # -- single-frame classifier used to pre-train the encoder ---------------
    def frame_forward(self, frames):
        return self.frame_head.forward(self.encode(frames))

    def frame_backward(self, dlogits):
        self.encoder.backward(self.frame_head.backward(dlogits))


def splice_nll(fused, labels):
    """Mean negative log of the fused posterior at the true label; returns (loss, dfused)."""
    n = len(fused)
    labels = np.asarray(labels)
    tiny = np.finfo(fused.dtype).tiny
    pt = np.maximum(fused[np.arange(n), labels], tiny)
    dfused = np.zeros_like(fused)
    dfused[np.arange(n), labels] = -1.0 / (n * pt)
    return float(-np.log(pt).mean()), dfused


@dataclass
class TwoStreamModel:
    rgb_stream: SpliceClassifier
    flow_stream: SpliceClassifier
    fusion_mode: str = "mean"
    lam: float = 0.5

    def __post_init__(self):
        a, b = self.rgb_stream.cfg, self.flow_stream.cfg
        if a.W != b.W or a.num_classes != b.num_classes:
            raise ValueError("streams must share splice length and label count")

    def predict(self, rgb_splices, flow_splices):
        r = self.rgb_stream.forward(rgb_splices)["fused_probs"]
        f = self.flow_stream.forward(flow_splices)["fused_probs"]
        return fuse_streams(r, f, self.fusion_mode, self.lam)


def grad_cam(stream: SpliceClassifier, splice_frames, t: int, c: int):
    """Class-activation heatmap of class ``c``'s logit at step ``t``.

    Channel weights are the spatial means of the logit's gradient with
    respect to the last conv activations of frame ``t``.  The map is
    rectified and max-normalised to [0, 1]; an all-zero map stays zero.
    """
    W, L = stream.cfg.W, stream.L
    if not 0 <= t < W:
        raise IndexError(f"step {t} out of range for W={W}")
    if not 0 <= c < L:
        raise IndexError(f"class {c} out of range for L={L}")
    x = np.asarray(splice_frames, dtype=stream.dtype)
    enc = stream.encoder
    feats, acts = enc.forward(x, keep=enc.cam_index)
    stream.forward_features(feats[None])
    dlogits = np.zeros((1, W, L), dtype=stream.dtype)
    dlogits[0, t, c] = 1.0
    dfeats = stream.backward_logits(dlogits, through_encoder=False)
    dA = enc.backward(dfeats[0], stop_at=enc.cam_index)
    stream.zero_grad()
    alpha = dA[t].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, acts[t], axes=1), 0.0)
    m = cam.max()
    return (cam / m if m > 0 else cam).astype(np.float64)
