"""Frame geometry, dataset normalisation and splice extraction.

The frame chain is: central crop (dataset specific M x N) -> random crop
(centre crop at evaluation) -> bilinear upscale -> per-channel
standardisation.  Upscaling the crop makes the small objects seen from a
head-mounted camera closer in size to those of the pretraining domain.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .imgops import resize_bilinear

__all__ = [
    "CropConfig", "DatasetStats", "RunningStats", "Splice", "central_crop",
    "random_crop", "resize_bilinear", "compute_dataset_stats", "make_splices",
    "preprocess_frame", "preprocess_batch", "load_frame", "write_tensor", "read_tensor",
]

VAR_EPS = 1e-8


@dataclass(frozen=True)
class CropConfig:
    central_M: int = 480
    central_N: int = 480
    crop_size: int = 224
    resize_to: int = 300
    random_seed: int = 0

    def __post_init__(self):
        if self.crop_size > min(self.central_M, self.central_N):
            raise ValueError(
                f"crop_size {self.crop_size} exceeds central crop "
                f"{self.central_M}x{self.central_N}"
            )
        if self.resize_to < 1:
            raise ValueError("resize_to must be >= 1")


@dataclass
class DatasetStats:
    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.mean, dtype="<f8").tobytes())
        h.update(np.asarray(self.var, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> dict:
        return {"mean": list(map(float, self.mean)), "var": list(map(float, self.var)),
                "count": int(self.count)}

    @classmethod
    def from_json(cls, d) -> "DatasetStats":
        return cls(np.array(d["mean"]), np.array(d["var"]), d.get("count", 0))


class RunningStats:
    """Per-channel mean/variance, single pass, mergeable (Chan et al.)."""

    def __init__(self, channels: int):
        self.n = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, pixels):
        """``pixels``: (..., C) array of samples."""
        x = np.asarray(pixels, dtype=np.float64).reshape(-1, len(self.mean))
        nb = len(x)
        if nb == 0:
            return self
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        self._combine(nb, mb, m2b)
        return self

    def merge(self, other: "RunningStats"):
        self._combine(other.n, other.mean, other.m2)
        return self

    def _combine(self, nb, mb, m2b):
        if nb == 0:
            return
        n = self.n + nb
        d = mb - self.mean
        self.mean = self.mean + d * nb / n
        self.m2 = self.m2 + m2b + d * d * self.n * nb / n
        self.n = n

    def result(self) -> DatasetStats:
        if self.n == 0:
            raise ValueError("no samples accumulated")
        return DatasetStats(self.mean.copy(), np.maximum(self.m2 / self.n, 0.0), self.n)


def central_crop(img, M: int, N: int):
    """Centred M (wide) x N (high) crop; an odd margin leaves the extra pixel right/bottom."""
    H, W = img.shape[:2]
    if M > W or N > H:
        raise ValueError(f"central crop {M}x{N} exceeds image {W}x{H}")
    x0 = (W - M) // 2
    y0 = (H - N) // 2
    return img[y0:y0 + N, x0:x0 + M]


def crop_offset(shape, crop_size: int, rng=None):
    """(x, y) offset of a crop: uniform if ``rng`` is given, else centred."""
    H, W = shape[:2]
    if crop_size > min(H, W):
        raise ValueError(f"crop {crop_size} larger than image {W}x{H}")
    if rng is None:
        return (W - crop_size) // 2, (H - crop_size) // 2
    return int(rng.integers(0, W - crop_size + 1)), int(rng.integers(0, H - crop_size + 1))


def random_crop(img, crop_size: int, rng=None):
    """Returns (crop, (x, y)); with ``rng=None`` the exact centre crop (evaluation mode)."""
    x, y = crop_offset(img.shape, crop_size, rng)
    return img[y:y + crop_size, x:x + crop_size], (x, y)


def load_frame(path) -> np.ndarray:
    """RGB frame as float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def compute_dataset_stats(manifest, split=None, loader=load_frame, crop=None) -> DatasetStats:
    """Statistics over the training frames of ``split`` (all frames if None).

    Frames are central-cropped first when ``crop`` is given so the statistics
    describe the pixels the network actually sees.
    """
    vids = manifest.videos if split is None else [
        manifest.video(v) for v in split.train_videos
    ]
    acc = None
    for v in vids:
        per_video = None
        for p in v.frame_paths:
            img = loader(manifest.frame_path(p))
            if crop is not None:
                img = central_crop(img, crop.central_M, crop.central_N)
            if per_video is None:
                per_video = RunningStats(img.shape[-1])
            per_video.update(img)
        acc = per_video if acc is None else acc.merge(per_video)
    if acc is None or acc.n == 0:
        raise ValueError("empty split: no training frames")
    return acc.result()


@dataclass
class Splice:
    center_index: int
    frame_indices: tuple[int, ...]
    label: int
    frames: np.ndarray | None = field(default=None, repr=False)

    @property
    def W(self) -> int:
        return len(self.frame_indices)


def make_splices(labels, W: int, mode: str = "train", stride: int | None = None):
    """Cut a video (given by its per-frame labels) into W-frame splices.

    train: one splice centred on every ``stride``-th frame (default 1),
    clamping indices at the ends; label of the centre frame.
    eval: consecutive non-overlapping tiles (default stride W), the last one
    shifted back to end on the final frame; label by majority vote with ties
    to the lowest class index.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    if W < 1 or W % 2 == 0:
        raise ValueError(f"splice length must be odd and >= 1, got {W}")
    if n == 0:
        raise ValueError("empty video")
    half = W // 2
    out = []
    if mode == "train":
        for t in range(0, n, stride or 1):
            idx = np.clip(np.arange(t - half, t + half + 1), 0, n - 1)
            out.append(Splice(t, tuple(int(i) for i in idx), int(labels[t])))
    elif mode == "eval":
        stride = stride or W
        start = 0
        while True:
            s = min(start, max(n - W, 0))
            idx = np.clip(np.arange(s, s + W), 0, n - 1)
            counts = np.bincount(labels[idx])
            out.append(Splice(s + half, tuple(int(i) for i in idx), int(np.argmax(counts))))
            if s + W >= n:
                break
            start += stride
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


def preprocess_frame(img, config: CropConfig, stats: DatasetStats | None, rng=None,
                     offset=None, resize: bool = True):
    """One frame through the full chain; returns a (C, S, S) float32 tensor.

    ``rng=None`` selects evaluation mode (centre crop).  An explicit
    ``offset`` overrides both, so all frames of a splice can share a crop.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    img = central_crop(img, config.central_M, config.central_N)
    if offset is None:
        offset = crop_offset(img.shape, config.crop_size, rng)
    x, y = offset
    img = img[y:y + config.crop_size, x:x + config.crop_size]
    if resize and config.resize_to != config.crop_size:
        img = resize_bilinear(img, config.resize_to, config.resize_to)
    if stats is not None:
        img = (img - stats.mean.astype(np.float32)) / np.sqrt(
            stats.var.astype(np.float32) + VAR_EPS)
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def preprocess_batch(frames, config: CropConfig, stats: DatasetStats | None, offsets,
                     resize: bool = True):
    """Vectorised chain for already central-cropped frames.

    ``frames``: (N, H, W, C) with H, W equal to the central crop;
    ``offsets``: (N, 2) crop offsets.  Returns (N, C, S, S) float32.
    """
    frames = np.asarray(frames, dtype=np.float32)
    cs = config.crop_size
    offsets = np.asarray(offsets, dtype=np.intp)
    ar = np.arange(cs)
    rows = (offsets[:, 1:2] + ar)[:, :, None]
    cols = (offsets[:, 0:1] + ar)[:, None, :]
    crops = frames[np.arange(len(frames))[:, None, None], rows, cols]  # N, cs, cs, C
    x = crops.transpose(0, 3, 1, 2)
    if resize and config.resize_to != cs:
        x = resize_bilinear(x, config.resize_to, config.resize_to)
    if stats is not None:
        m = stats.mean.astype(np.float32)[:, None, None]
        s = np.sqrt(stats.var.astype(np.float32) + VAR_EPS)[:, None, None]
        x = (x - m) / s
    return np.ascontiguousarray(x, dtype=np.float32)


# -- on-disk tensor cache: raw little-endian float32 + JSON header -------------

def write_tensor(path, arr, **meta) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = {"dims": list(arr.shape), "dtype": "float32-le", **meta}
    path.with_suffix(".bin").write_bytes(arr.tobytes())
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))


def read_tensor(path, expect_stats_hash: str | None = None):
    """Returns the array, or None when the header's stats hash is stale."""
    path = Path(path)
    hdr_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
    if not hdr_path.exists() or not bin_path.exists():
        return None
    header = json.loads(hdr_path.read_text())
    if expect_stats_hash is not None and header.get("stats_hash") != expect_stats_hash:
        return None
    data = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    return data.reshape(header["dims"]).astype(np.float32)
