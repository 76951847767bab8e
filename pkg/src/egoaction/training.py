"""Stream training: SGD with momentum and step decay, and curriculum label merging.

A stream is trained in two stages.  The encoder is first fitted as a
single-frame classifier (with its own small head); its features are then
frozen and the LSTM, per-step head and step weights are trained on splices.
With a curriculum schedule, pairs of opposite classes share one label for
the first ``phase1_iterations`` (counted over both stages) and are then
split apart.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataset_io import LabelMap
from .model import ModelConfig, SpliceClassifier, splice_nll
from .nn.layers import softmax_cross_entropy
from .preprocessing import (CropConfig, DatasetStats, RunningStats, central_crop, crop_offset,
                            load_frame, make_splices, preprocess_batch)

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainingConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    weight_decay: float = 0.005
    seed: int = 0
    # encoder (single-frame) stage
    cnn_iterations: int = 50_000
    cnn_lr_step: int = 10_000
    cnn_batch_size: int = 128
    # recurrent stage
    lstm_iterations: int = 50_000
    lstm_lr_step: int = 50_000
    batch_size: int = 128
    grad_clip: float = 5.0
    feature_views: int = 4  # random-crop views per video cached for the LSTM stage
    val_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "val_every", "checkpoint_every", "weight_decay"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0")
            elif f.name in ("cnn_iterations", "lstm_iterations", "momentum"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0")
            elif not v > 0:
                raise ValueError(f"{f.name} must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")

    @property
    def max_iterations(self):
        return self.cnn_iterations + self.lstm_iterations

    def to_json(self):
        return asdict(self)


def paper_preset(stream: str) -> TrainingConfig:
    """Schedules as reported for full-size training (iterations, step sizes)."""
    if stream == "rgb":
        return TrainingConfig(cnn_iterations=50_000, cnn_lr_step=10_000,
                              lstm_iterations=50_000, lstm_lr_step=50_000)
    if stream == "flow":
        return TrainingConfig(cnn_iterations=70_000, cnn_lr_step=20_000,
                              lstm_iterations=70_000, lstm_lr_step=20_000)
    raise ValueError(f"unknown stream {stream!r}")


def desk_preset(stream: str, **overrides) -> TrainingConfig:
    """Full-size schedule with every iteration count divided by 100 and batch size 16.

    The base learning rate is raised because the encoder starts from random
    weights instead of a pretrained backbone.
    """
    p = paper_preset(stream)
    kw = dict(
        base_lr=0.01, cnn_iterations=p.cnn_iterations // 100, cnn_lr_step=p.cnn_lr_step // 100,
        lstm_iterations=p.lstm_iterations // 100, lstm_lr_step=p.lstm_lr_step // 100,
        cnn_batch_size=16, batch_size=16,
    )
    kw.update(overrides)
    return replace(p, **kw)


@dataclass(frozen=True)
class CurriculumSchedule:
    merge_pairs: tuple = ()
    phase1_iterations: int = 0
    phase2_iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "merge_pairs", tuple(tuple(p) for p in self.merge_pairs))


# -- optimiser ---------------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    iteration: int = 0


def lr_at(iteration: int, base_lr: float, decay: float, step: int) -> float:
    return base_lr * decay ** (iteration // step)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= s
    return total


def sgd_step(params, state: OptimizerState, config: TrainingConfig, lr_step: int) -> float:
    """One momentum step on ``params`` (their ``.grad``); returns the learning rate used.

    v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {p.name!r}")
    lr = lr_at(state.iteration, config.base_lr, config.lr_decay_factor, lr_step)
    for p in params:
        v = state.velocity.get(p.name)
        if v is None or v.shape != p.value.shape:
            v = np.zeros_like(p.value)
        v = config.momentum * v - lr * (p.grad + config.weight_decay * p.value)
        state.velocity[p.name] = v
        p.value = (p.value + v).astype(p.value.dtype, copy=False)
    state.iteration += 1
    return lr


# -- curriculum ----------------------------------------------------------------

def _class_index(label_map: LabelMap, c):
    return label_map.index(c) if isinstance(c, str) else int(c)


def curriculum_merge(label_map: LabelMap, pairs):
    """Merge each pair into one class named "a+b".

    Returns (merged LabelMap, mapping) with ``mapping[old] = merged index``.
    Merged classes keep the position of the pair's first member.
    """
    idx_pairs = []
    used = set()
    for a, b in pairs:
        ia, ib = _class_index(label_map, a), _class_index(label_map, b)
        for i in (ia, ib):
            if not 0 <= i < label_map.L:
                raise ValueError(f"class {i} out of range")
        if ia == ib:
            raise ValueError(f"cannot merge class {ia} with itself")
        if ia in used or ib in used:
            raise ValueError(f"overlapping merge pairs at {label_map.names[ia]}/{label_map.names[ib]}")
        used.update((ia, ib))
        idx_pairs.append((min(ia, ib), max(ia, ib)))
    partner = {a: b for a, b in idx_pairs}
    second = {b: a for a, b in idx_pairs}
    names, mapping = [], np.empty(label_map.L, dtype=np.intp)
    for i, n in enumerate(label_map.names):
        if i in second:
            continue
        if i in partner:
            names.append(f"{n}+{label_map.names[partner[i]]}")
            mapping[i] = mapping[partner[i]] = len(names) - 1
        else:
            names.append(n)
            mapping[i] = len(names) - 1
    return LabelMap(names), mapping


def merge_probs(probs, mapping, merged_L: int):
    """Sum full-label posteriors into merged classes."""
    probs = np.asarray(probs)
    out = np.zeros(probs.shape[:-1] + (merged_L,), dtype=probs.dtype)
    for old, new in enumerate(mapping):
        out[..., new] += probs[..., old]
    return out


def curriculum_split(model: SpliceClassifier, mapping, full_map: LabelMap, rng,
                     noise_std: float = 0.01) -> SpliceClassifier:
    """Expand a merged-label model to the full label set.

    Every full class gets a copy of its merged class's head row (weights and
    bias) plus Gaussian noise on the weights.  Copies of a k-way merged class
    have log(k) subtracted from their bias, so before noise the summed
    posterior of the copies equals the merged posterior at every step.
    Encoder and LSTM parameters are carried over unchanged.
    """
    mapping = np.asarray(mapping)
    merged_L = model.L
    if len(mapping) != full_map.L or mapping.max() >= merged_L or mapping.min() < 0:
        raise ValueError("mapping inconsistent with the model and label maps")
    if len(np.unique(mapping)) != merged_L:
        raise ValueError("mapping is not onto the merged label set")
    counts = np.bincount(mapping, minlength=merged_L)
    new = SpliceClassifier(replace(model.cfg, num_classes=full_map.L), model.dtype)
    state = model.state_dict()
    for head in ("head", "frame_head"):
        Wm, bm = state[f"{head}.W"], state[f"{head}.b"]
        W = Wm[mapping].copy()
        if noise_std > 0:
            W = W + rng.normal(0.0, noise_std, W.shape).astype(W.dtype)
        state[f"{head}.W"] = W
        state[f"{head}.b"] = (bm[mapping] - np.log(counts[mapping])).astype(bm.dtype)
    new.load_state_dict(state)
    return new


# -- data ----------------------------------------------------------------------

class StreamData:
    """Central-cropped frames of a set of videos held in memory."""

    def __init__(self, manifest, video_ids, crop: CropConfig, loader=load_frame):
        self.crop = crop
        self.videos = []
        self.labels = []
        self.ids = list(video_ids)
        for vid in self.ids:
            v = manifest.video(vid)
            frames = np.stack([
                central_crop(loader(manifest.frame_path(p)), crop.central_M, crop.central_N)
                for p in v.frame_paths]).astype(np.float32)
            self.videos.append(frames)
            self.labels.append(np.asarray(v.frame_labels, dtype=np.intp))
        self.lengths = np.array([len(x) for x in self.videos])

    def stats(self) -> DatasetStats:
        acc = RunningStats(self.videos[0].shape[-1])
        for v in self.videos:
            acc.merge(RunningStats(v.shape[-1]).update(v))
        return acc.result()

    def sample_frames(self, rng, n):
        cum = np.cumsum(self.lengths)
        flat = rng.integers(0, cum[-1], n)
        vi = np.searchsorted(cum, flat, side="right")
        fi = flat - np.concatenate([[0], cum[:-1]])[vi]
        return vi, fi


def encode_video(model: SpliceClassifier, frames, crop, stats, offset, resize, chunk=256):
    """Features (T, D) of one central-cropped video under a fixed crop offset."""
    out = []
    offs = np.tile(np.asarray(offset)[None], (min(chunk, len(frames)), 1))
    for s in range(0, len(frames), chunk):
        part = frames[s:s + chunk]
        x = preprocess_batch(part, crop, stats, offs[:len(part)], resize)
        out.append(model.encode(x))
    return np.concatenate(out).astype(model.dtype)


@dataclass
class TrainResult:
    model: SpliceClassifier
    log: list
    stats: DatasetStats
    label_map: LabelMap
    phase1_model: SpliceClassifier | None = None
    split_model: SpliceClassifier | None = None
    mapping: np.ndarray | None = None
    checkpoints: list = field(default_factory=list)


def _input_size(crop: CropConfig, resize: bool):
    return crop.resize_to if resize else crop.crop_size


def train_stream(manifest, split, model_cfg: ModelConfig, crop: CropConfig,
                 config: TrainingConfig, schedule: CurriculumSchedule | None = None,
                 stats: DatasetStats | None = None, resize: bool = True, kind: str = "rgb",
                 out_dir=None, data: StreamData | None = None) -> TrainResult:
    """Train one stream on the training videos of ``split``.

    The encoder input size is taken from ``crop`` (``resize_to`` or, with
    ``resize=False``, ``crop_size``).  Logs one record per iteration.
    """
    rng = np.random.default_rng(config.seed)
    full_map = manifest.label_map
    data = data or StreamData(manifest, split.train_videos, crop)
    stats = stats or data.stats()
    mapping = np.arange(full_map.L)
    label_map = full_map
    if schedule is not None and schedule.merge_pairs:
        if schedule.phase1_iterations + schedule.phase2_iterations != config.max_iterations:
            raise ValueError(
                f"curriculum phases ({schedule.phase1_iterations}+{schedule.phase2_iterations}) "
                f"must add up to the {config.max_iterations} training iterations")
        label_map, mapping = curriculum_merge(full_map, schedule.merge_pairs)
    else:
        schedule = None
    enc_cfg = replace(model_cfg.encoder, input_size=_input_size(crop, resize),
                      in_channels=data.videos[0].shape[-1])
    model = SpliceClassifier(replace(model_cfg, encoder=enc_cfg, num_classes=label_map.L))
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model, [], stats, label_map, mapping=mapping)
    cur = {"mapping": mapping, "phase": 1 if schedule else 0}
    W = model_cfg.W
    gi = 0  # iteration counter across both stages
    last_ckpt = None

    def maybe_split():
        nonlocal model
        if schedule is not None and cur["phase"] == 1 and gi == schedule.phase1_iterations:
            result.phase1_model = _clone(model)
            model = curriculum_split(model, cur["mapping"], full_map, rng)
            result.split_model = _clone(model)
            cur["mapping"] = np.arange(full_map.L)
            cur["phase"] = 2
            return True
        return False

    def record(stage, i, lr, loss):
        rec = {"iter": gi, "stage": stage, "stage_iter": i, "lr": lr, "loss": loss,
               "phase": cur["phase"]}
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {gi}", last_ckpt)
        result.log.append(rec)
        return rec

    def checkpoint():
        nonlocal last_ckpt
        if out_dir is not None and config.checkpoint_every and gi % config.checkpoint_every == 0:
            out_dir.mkdir(parents=True, exist_ok=True)
            last_ckpt = out_dir / f"{kind}_iter{gi:06d}"
            model.save(last_ckpt, label_names=list(_current_names(full_map, label_map, cur)))
            result.checkpoints.append(str(last_ckpt))

    # stage 1: encoder as a frame classifier
    state = OptimizerState()
    for i in range(config.cnn_iterations):
        if maybe_split():
            state = OptimizerState()
        vi, fi = data.sample_frames(rng, config.cnn_batch_size)
        frames = np.stack([data.videos[a][b] for a, b in zip(vi, fi)])
        offs = np.array([crop_offset(frames.shape[1:], crop.crop_size, rng) for _ in vi])
        x = preprocess_batch(frames, crop, stats, offs, resize)
        y = cur["mapping"][np.array([data.labels[a][b] for a, b in zip(vi, fi)])]
        model.zero_grad()
        loss, dlogits = softmax_cross_entropy(model.frame_forward(x), y)
        model.frame_backward(dlogits.astype(model.dtype))
        params = model.encoder.parameters() + model.frame_head.parameters()
        lr = sgd_step(params, state, config, config.cnn_lr_step)
        gi += 1
        record("cnn", i, lr, loss)
        checkpoint()

    # cache features of a few fixed crops per video for the recurrent stage
    views = []
    for vi, frames in enumerate(data.videos):
        per = []
        for k in range(config.feature_views):
            off = crop_offset(frames.shape[1:], crop.crop_size, None if k == 0 else rng)
            per.append(encode_video(model, frames, crop, stats, off, resize))
        views.append(per)

    state = OptimizerState()
    for i in range(config.lstm_iterations):
        if maybe_split():
            state = OptimizerState()
        vi, ti = data.sample_frames(rng, config.batch_size)
        kv = rng.integers(0, config.feature_views, len(vi))
        half = W // 2
        feats = np.stack([
            views[a][k][np.clip(np.arange(t - half, t + half + 1), 0, data.lengths[a] - 1)]
            for a, t, k in zip(vi, ti, kv)])
        y = cur["mapping"][np.array([data.labels[a][t] for a, t in zip(vi, ti)])]
        model.zero_grad()
        out = model.forward_features(feats)
        loss, dfused = splice_nll(out["fused_probs"], y)
        model.backward_fused(dfused, through_encoder=False)
        params = model.lstm.parameters() + model.head.parameters() + [model.step_weights]
        clip_grad_norm(params, config.grad_clip)
        lr = sgd_step(params, state, config, config.lstm_lr_step)
        gi += 1
        rec = record("lstm", i, lr, loss)
        if config.val_every and (i + 1) % config.val_every == 0:
            rec["val_accuracy"] = _val_accuracy(model, views, data, cur["mapping"], W)
        checkpoint()

    maybe_split()
    result.model = model
    result.label_map = full_map if schedule else label_map
    return result


def _current_names(full_map, merged_map, cur):
    return full_map.names if cur["phase"] != 1 else merged_map.names


def _clone(model: SpliceClassifier) -> SpliceClassifier:
    m = SpliceClassifier(model.cfg, model.dtype)
    m.load_state_dict(model.state_dict())
    return m


def _val_accuracy(model, views, data, mapping, W):
    """Frame accuracy on the held-in (training-subject) videos, centre crop, eval tiling."""
    correct = total = 0
    for vi, per in enumerate(views):
        labels = mapping[data.labels[vi]]
        splices = make_splices(labels, W, "eval")
        feats = np.stack([per[0][list(s.frame_indices)] for s in splices])
        pred = np.argmax(model.forward_features(feats)["fused_probs"], axis=1)
        frame_pred = np.empty(len(labels), dtype=np.intp)
        for s, p in zip(splices, pred):
            frame_pred[list(s.frame_indices)] = p
        correct += int((frame_pred == labels).sum())
        total += len(labels)
    return correct / total


def write_log(records, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
