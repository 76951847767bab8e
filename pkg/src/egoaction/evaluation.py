"""Frame-level evaluation: splice predictions propagated to frames, confusion
matrices, average recall and leave-one-subject-out aggregation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .model import SpliceClassifier, TwoStreamModel, fuse_streams
from .preprocessing import make_splices

log = logging.getLogger(__name__)

MODES = ("rgb", "flow", "combined")


class MissingCheckpoint(FileNotFoundError):
    pass


# -- prediction ------------------------------------------------------------------

def splice_posteriors(model: SpliceClassifier, video, splices, chunk=256):
    """Fused posteriors (n_splices, L) of one stream; every frame is encoded once."""
    video = np.asarray(video, dtype=model.dtype)
    feats = np.concatenate([model.encode(video[s:s + chunk]) for s in range(0, len(video), chunk)])
    idx = np.array([s.frame_indices for s in splices])
    return model.forward_features(feats[idx])["fused_probs"]


def propagate(splices, labels, n_frames):
    """Give every frame its splice's label; later tiles overwrite earlier ones."""
    out = np.full(n_frames, -1, dtype=np.intp)
    for s, lab in zip(splices, labels):
        out[list(s.frame_indices)] = lab
    return out


def predict_frames(model, video, W: int | None = None, mode: str = "rgb", return_probs=False):
    """Per-frame labels of one video.

    ``mode`` is "rgb" or "flow" (``model`` a SpliceClassifier, ``video`` a
    (T, C, S, S) tensor) or "combined" (``model`` a TwoStreamModel, ``video``
    an (rgb, flow) pair of tensors).  Argmax ties go to the lowest class index.
    """
    if mode == "combined":
        if not isinstance(model, TwoStreamModel):
            raise TypeError("combined mode needs a TwoStreamModel")
        rgb, flow = video
        if len(rgb) != len(flow):
            raise ValueError(f"stream lengths differ: {len(rgb)} vs {len(flow)}")
        W = W or model.rgb_stream.cfg.W
        T = len(rgb)
    elif mode in ("rgb", "flow"):
        W = W or model.cfg.W
        T = len(video)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if T < 1:
        raise ValueError("video has no frames")
    splices = make_splices(np.zeros(T, dtype=np.intp), W, "eval")
    if mode == "combined":
        if W != model.rgb_stream.cfg.W:
            raise ValueError(f"W={W} does not match the model (W={model.rgb_stream.cfg.W})")
        probs = fuse_streams(splice_posteriors(model.rgb_stream, rgb, splices),
                             splice_posteriors(model.flow_stream, flow, splices),
                             model.fusion_mode, model.lam)
    else:
        if W != model.cfg.W:
            raise ValueError(f"W={W} does not match the model (W={model.cfg.W})")
        probs = splice_posteriors(model, video, splices)
    pred = propagate(splices, np.argmax(probs, axis=1), T)
    return (pred, probs) if return_probs else pred


# -- scoring -----------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # row = ground truth, column = prediction
    names: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.names = tuple(self.names)
        L = len(self.names)
        if self.counts.shape != (L, L):
            raise ValueError(f"counts shape {self.counts.shape} does not match {L} classes")
        if np.any(self.counts < 0):
            raise ValueError("negative counts")

    @classmethod
    def empty(cls, names):
        return cls(np.zeros((len(names), len(names)), dtype=np.int64), names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")

    def recalls(self):
        """Per-class recall; NaN for classes without ground-truth frames."""
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    def row_normalized(self):
        rows = self.counts.sum(axis=1, keepdims=True)
        return self.counts / np.maximum(rows, 1)

    def __add__(self, other):
        if self.names != other.names:
            raise ValueError("label names differ")
        return ConfusionMatrix(self.counts + other.counts, self.names)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["gt\\pred", *self.names])
            for n, row in zip(self.names, self.counts):
                w.writerow([n, *row.tolist()])

    def to_png(self, path, cell=16):
        """Row-normalised heatmap, white = 0, black = 1."""
        img = np.round(255 * (1 - self.row_normalized())).astype(np.uint8)
        img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
        img[::cell, :] = 200
        img[:, ::cell] = 200
        Image.fromarray(img, mode="L").save(path)


def score(predictions, ground_truth, names) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.intp)
    g = np.asarray(ground_truth, dtype=np.intp)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {len(p)} predictions for {len(g)} frames")
    L = len(names)
    for a, what in ((p, "prediction"), (g, "label")):
        if a.size and (a.min() < 0 or a.max() >= L):
            raise ValueError(f"{what} out of range for {L} classes")
    counts = np.zeros((L, L), dtype=np.int64)
    np.add.at(counts, (g, p), 1)
    return ConfusionMatrix(counts, names)


def average_recall(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    r = cm.recalls()
    return float(np.nanmean(r))


def cross_category_confusion(cm: ConfusionMatrix, categories) -> float | None:
    """Fraction of scored frames predicted into a class of another category."""
    if categories is None or cm.total == 0:
        return None
    cats = np.asarray(categories)
    other = cats[:, None] != cats[None, :]
    return float(cm.counts[other].sum()) / cm.total


# -- reports -------------------------------------------------------------------------

@dataclass
class StreamResult:
    confusion: ConfusionMatrix
    per_split: dict = field(default_factory=dict)  # subject -> {"accuracy", "frames"}
    categories: tuple | None = None

    @property
    def frame_accuracy(self):
        return self.confusion.accuracy

    def to_json(self):
        cm = self.confusion
        return {
            "frame_accuracy": cm.accuracy,
            "average_recall": average_recall(cm) if cm.total else None,
            "per_class_recall": {n: (None if np.isnan(r) else float(r))
                                 for n, r in zip(cm.names, cm.recalls())},
            "frames": cm.total,
            "confusion": cm.counts.tolist(),
            "cross_category_confusion": cross_category_confusion(cm, self.categories),
            "per_split": self.per_split,
        }


@dataclass
class EvalReport:
    label_names: tuple
    streams: dict  # mode -> StreamResult
    failed_splits: dict = field(default_factory=dict)  # subject -> reason
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "label_names": list(self.label_names),
            "streams": {k: v.to_json() for k, v in self.streams.items()},
            "failed_splits": self.failed_splits,
            "meta": self.meta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(self.dumps())
        paths = {"report": str(out / "eval_report.json")}
        for mode, res in self.streams.items():
            res.confusion.to_csv(out / f"confusion_{mode}.csv")
            res.confusion.to_png(out / f"confusion_{mode}.png")
            paths[mode] = str(out / f"confusion_{mode}.csv")
        return paths


def loso_evaluate(manifest, splits, predictor, modes=MODES) -> EvalReport:
    """Pool frame predictions of every held-out subject into one report.

    ``predictor(split)`` returns ``{mode: {video_id: per-frame labels}}`` for
    the split's test videos, or raises MissingCheckpoint.  Failed splits are
    recorded and skipped; if every split fails the last error is raised.
    """
    names = manifest.label_map.names
    results = {m: StreamResult(ConfusionMatrix.empty(names), {}, manifest.categories)
               for m in modes}
    failed = {}
    last_err = None
    for split in splits:
        try:
            preds = predictor(split)
        except MissingCheckpoint as e:
            failed[split.held_out_subject] = str(e)
            last_err = e
            log.error("split %s failed: %s", split.held_out_subject, e)
            continue
        for mode in modes:
            cm = ConfusionMatrix.empty(names)
            for vid in split.test_videos:
                gt = manifest.video(vid).frame_labels
                cm = cm + score(preds[mode][vid], gt, names)
            results[mode].confusion = results[mode].confusion + cm
            results[mode].per_split[split.held_out_subject] = {
                "accuracy": cm.accuracy, "frames": cm.total}
    if len(failed) == len(splits) and last_err is not None:
        raise last_err
    return EvalReport(names, results, failed)
