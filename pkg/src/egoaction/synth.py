"""Deterministic synthetic egocentric videos with exact ground truth.

A scene is an analytic background texture plus at most one object living in
world coordinates.  A head-mounted camera maps world to image through a
homography ``G_k`` that follows a smooth mean-reverting random walk
(rotation, translation, zoom and a little perspective), so the frame-to-frame
head motion ``H_k = G_{k+1} G_k^-1`` is known exactly, as are per-pixel flow,
object masks and object boxes.

Classes are told apart either by what the object is (shape/colour, static
in the world) or by how it moves (a "hand" sweeping in one direction), which
gives appearance-only and motion-only classes plus opposite-motion pairs.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset_io import DatasetManifest, LabelMap, VideoRecord, write_manifest
from .ego_compensation import apply_homography
from .optical_flow import write_flo


@dataclass(frozen=True)
class ClassSpec:
    name: str
    shape: str | None = None  # square | disc | triangle | cross | hand | None
    color: tuple = (0.85, 0.15, 0.15)
    motion: tuple = (0.0, 0.0)  # object displacement per frame, world pixels
    head_scale: float = 1.0  # multiplies the random head motion
    head_translation: tuple = (0.0, 0.0)  # constant camera drift per frame
    category: str = "hand-object"


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple = ()
    image_size: int = 64
    n_subjects: int = 4
    videos_per_subject: int = 3
    frames_per_video: int = 200
    segment_length: tuple = (50, 80)
    object_size: float = 12.0
    cycle_length: int = 20  # frames per sweep of a moving object
    head_rotation: float = 0.25  # degrees, per-frame innovation std
    head_shift: float = 0.35  # pixels
    head_zoom: float = 0.002
    head_perspective: float = 1e-5
    head_smoothness: float = 0.8  # AR(1) coefficient of the head velocity
    head_recentre: float = 0.95  # pull of the head pose back to rest
    background_contrast: float = 0.22
    color_jitter: float = 0.05
    same_object_color: bool = False
    emit_gt_flow: bool = True
    name: str = "synth"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(
            c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes))
        if len(self.classes) == 0:
            raise ValueError("synthetic dataset needs at least one class")
        if self.frames_per_video < 2:
            raise ValueError("frames_per_video must be >= 2")

    def to_json(self):
        return asdict(self)


def default_classes():
    """Three appearance classes and three motion classes; open/close are opposites."""
    hand = (0.92, 0.68, 0.52)
    return (
        ClassSpec("take_cup", "square", (0.85, 0.12, 0.12)),
        ClassSpec("take_bread", "disc", (0.95, 0.80, 0.10)),
        ClassSpec("take_spoon", "triangle", (0.15, 0.30, 0.90)),
        ClassSpec("open", "hand", hand, motion=(0.8, 0.0)),
        ClassSpec("close", "hand", hand, motion=(-0.8, 0.0)),
        ClassSpec("lift", "hand", hand, motion=(0.0, -0.8)),
    )


def benchmark_config(**kw) -> SynthConfig:
    kw.setdefault("videos_per_subject", 4)
    return SynthConfig(classes=default_classes(), **kw)


def small_object_config(**kw) -> SynthConfig:
    """Objects under 3% of the frame, one shared colour: only shape identifies them."""
    kw.setdefault("object_size", 8.0)
    kw.setdefault("same_object_color", True)
    return SynthConfig(classes=default_classes(), **kw)


# -- geometry ------------------------------------------------------------------

def _pose_homography(state, size):
    """Camera homography for pose (theta_deg, tx, ty, log_zoom, px, py) about the image centre."""
    th, tx, ty, lz, px, py = state
    c = (size - 1) / 2.0
    a = np.deg2rad(th)
    s = np.exp(lz)
    T = np.array([[1, 0, c], [0, 1, c], [0, 0, 1.0]])
    Ti = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    R = np.array([[s * np.cos(a), -s * np.sin(a), tx],
                  [s * np.sin(a), s * np.cos(a), ty],
                  [px, py, 1.0]])
    return T @ R @ Ti


def _shape_sdf(shape, rx, ry, size):
    h = size / 2.0
    if shape == "square":
        return np.maximum(np.abs(rx), np.abs(ry)) - h
    if shape == "disc":
        return np.hypot(rx, ry) - h
    if shape == "triangle":
        # apex up, base down, circumradius ~ h
        n = np.array([[0.0, 1.0], [0.866, -0.5], [-0.866, -0.5]])
        d = np.max([-(n[i, 0] * rx + n[i, 1] * -ry) for i in range(3)], axis=0)
        return d - 0.5 * h * 1.1
    if shape == "cross":
        a = np.maximum(np.abs(rx) - h, np.abs(ry) - h / 3)
        b = np.maximum(np.abs(rx) - h / 3, np.abs(ry) - h)
        return np.minimum(a, b)
    if shape == "hand":
        return (np.hypot(rx / (1.15 * h), ry / (0.8 * h)) - 1.0) * 0.8 * h
    raise ValueError(f"unknown shape {shape!r}")


class _Texture:
    """Smooth background: a sum of sinusoids in world coordinates, mostly luminance."""

    def __init__(self, rng, contrast):
        k = 8
        self.base = 0.47 + rng.uniform(-0.04, 0.04, 3)  # mild per-subject tint
        wl = rng.uniform(7.0, 18.0, k)
        th = rng.uniform(0, np.pi, k)
        self.fx = 2 * np.pi / wl * np.cos(th)
        self.fy = 2 * np.pi / wl * np.sin(th)
        self.phase = rng.uniform(0, 2 * np.pi, k)
        self.amp = rng.uniform(0.5, 1.0, k)
        self.gain = 1.0 + rng.uniform(-0.2, 0.2, 3)
        self.contrast = contrast / np.sqrt(k)

    def __call__(self, qx, qy):
        arg = qx[..., None] * self.fx + qy[..., None] * self.fy + self.phase
        lum = self.contrast * (self.amp * np.sin(arg)).sum(-1)
        return self.base + lum[..., None] * self.gain


@dataclass
class Segment:
    label: int
    start: int
    length: int


@dataclass
class RenderedVideo:
    frames: np.ndarray  # (T, H, W, 3) uint8
    labels: np.ndarray  # (T,)
    homographies: np.ndarray  # (T-1, 3, 3): frame k -> k+1 background motion
    flows: np.ndarray | None  # (T-1, H, W, 2) ground-truth flow k -> k+1
    masks: np.ndarray  # (T, H, W) uint8 object masks
    boxes: list  # per frame [x0, y0, x1, y1) or None
    segments: list = field(default_factory=list)


def _segments(cfg: SynthConfig, class_seq, rng):
    lo, hi = cfg.segment_length
    segs, t = [], 0
    while t < cfg.frames_per_video:
        n = int(rng.integers(lo, hi + 1))
        rest = cfg.frames_per_video - t
        if rest - n < lo:
            n = rest
        segs.append(Segment(next(class_seq), t, n))
        t += n
    return segs


def render_video(cfg: SynthConfig, segments, rng, subject_rng=None,
                 texture=None, object_style=None) -> RenderedVideo:
    """Render one video given its segments (label, start, length)."""
    S = cfg.image_size
    T = sum(s.length for s in segments)
    subject_rng = subject_rng or rng
    texture = texture or _Texture(subject_rng, cfg.background_contrast)
    style = object_style or _object_style(cfg, subject_rng)
    labels = np.empty(T, dtype=np.int64)
    seg_of = np.empty(T, dtype=np.int64)
    for i, s in enumerate(segments):
        labels[s.start:s.start + s.length] = s.label
        seg_of[s.start:s.start + s.length] = i

    # head pose process
    sig = np.array([cfg.head_rotation, cfg.head_shift, cfg.head_shift, cfg.head_zoom,
                    cfg.head_perspective, cfg.head_perspective]) * style["head_gain"]
    state = np.zeros(6)
    vel = np.zeros(6)
    drift = np.zeros(2)
    poses = []
    for k in range(T + 1):
        spec = cfg.classes[labels[min(k, T - 1)]]
        G = _pose_homography(state, S)
        D = np.array([[1, 0, drift[0]], [0, 1, drift[1]], [0, 0, 1.0]])
        poses.append(D @ G)
        vel = cfg.head_smoothness * vel + rng.standard_normal(6) * sig * spec.head_scale
        state = cfg.head_recentre * state + vel
        drift = drift + np.asarray(spec.head_translation, dtype=np.float64)
    poses = np.array(poses)

    # object centre in world coordinates, per frame (and per-frame step)
    centre = (S - 1) / 2.0
    anchors = []
    for s in segments:
        off = rng.uniform(-3, 3, 2)
        anchors.append(apply_homography(np.linalg.inv(poses[s.start]), centre + off))

    def obj_centre(k, seg_idx):
        s = segments[seg_idx]
        spec = cfg.classes[s.label]
        m = np.asarray(spec.motion, dtype=np.float64)
        tau = k - s.start
        phase = (tau % cfg.cycle_length) - cfg.cycle_length / 2.0 if np.any(m) else 0.0
        return anchors[seg_idx] + m * phase

    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    pix = np.stack([xx, yy], axis=-1)
    frames = np.empty((T, S, S, 3), dtype=np.uint8)
    masks = np.zeros((T, S, S), dtype=np.uint8)
    flows = np.empty((T - 1, S, S, 2), dtype=np.float32) if cfg.emit_gt_flow else None
    boxes = []
    for k in range(T):
        Ginv = np.linalg.inv(poses[k])
        q = apply_homography(Ginv, pix)
        img = texture(q[..., 0], q[..., 1])
        spec = cfg.classes[labels[k]]
        alpha = np.zeros((S, S))
        if spec.shape is not None:
            c = obj_centre(k, seg_of[k])
            r = q - c
            sdf = _shape_sdf(spec.shape, r[..., 0], r[..., 1], style["size"])
            alpha = np.clip(0.5 - sdf, 0.0, 1.0)
            col = np.asarray(style["colors"][labels[k]])
            shade = 0.8 + 0.2 * np.cos(2 * np.pi * r[..., 0] / style["size"])
            img = img * (1 - alpha[..., None]) + (col * shade[..., None]) * alpha[..., None]
        frames[k] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        inside = alpha > 0.5
        masks[k] = inside
        if inside.any():
            ys, xs = np.nonzero(inside)
            boxes.append([int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1])
        else:
            boxes.append(None)
        if flows is not None and k < T - 1:
            fl = apply_homography(poses[k + 1], q) - pix
            if spec.shape is not None:
                step = np.asarray(spec.motion, dtype=np.float64)
                moved = apply_homography(poses[k + 1], q + step) - pix
                fl = np.where(inside[..., None], moved, fl)
            flows[k] = fl
    Hs = np.array([poses[k + 1] @ np.linalg.inv(poses[k]) for k in range(T)])[:T - 1]
    Hs = Hs / Hs[:, 2:3, 2:3]
    return RenderedVideo(frames, labels, Hs, flows, masks, boxes,
                         [asdict(s) for s in segments])


def _object_style(cfg, rng):
    L = len(cfg.classes)
    cols = []
    shared = np.array(cfg.classes[0].color)
    for spec in cfg.classes:
        base = shared if (cfg.same_object_color and spec.shape != "hand") else np.array(spec.color)
        cols.append(np.clip(base + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1))
    return {
        "colors": cols[:L],
        "size": cfg.object_size * rng.uniform(0.9, 1.1),
        "head_gain": rng.uniform(0.7, 1.3),
    }


def _class_cycle(L, rng):
    while True:
        for c in rng.permutation(L):
            yield int(c)


def generate_synthetic_dataset(config: SynthConfig, seed: int, out_dir, jobs: int = 1
                               ) -> DatasetManifest:
    """Write frames, ground truth and ``manifest.jsonl`` under ``out_dir``.

    Layout: ``frames/<video>/NNNNN.png``; ``gt/<video>/flow_NNNNN.flo`` (flow
    from frame N to N+1), ``gt/<video>/meta.json`` (homographies, boxes,
    segments) and ``gt/<video>/masks.npy``.  Output bytes depend only on
    ``(config, seed)``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    L = len(config.classes)
    jobs_list = []
    for si in range(config.n_subjects):
        srng = np.random.default_rng([seed, si])
        texture = _Texture(srng, config.background_contrast)
        style = _object_style(config, srng)
        cyc = _class_cycle(L, srng)
        for vi in range(config.videos_per_subject):
            vrng = np.random.default_rng([seed, si, vi, 1])
            segs = _segments(config, cyc, vrng)
            jobs_list.append((f"S{si + 1}", f"S{si + 1}_v{vi}", segs, texture, style,
                              [seed, si, vi, 2]))

    def work(job):
        subject, vid, segs, texture, style, vseed = job
        rv = render_video(config, segs, np.random.default_rng(vseed), texture=texture,
                          object_style=style)
        return subject, vid, _write_video(out, vid, rv)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(work, jobs_list))
    else:
        results = [work(j) for j in jobs_list]

    videos = [VideoRecord(vid, subject, paths, labels) for subject, vid, (paths, labels) in results]
    m = DatasetManifest(videos, LabelMap([c.name for c in config.classes]), config.name,
                        root=out, categories=tuple(c.category for c in config.classes))
    write_manifest(m, out / "manifest.jsonl")
    (out / "synth_config.json").write_text(json.dumps(
        {"seed": seed, "config": config.to_json()}, indent=1, sort_keys=True))
    return m


def _write_video(out: Path, vid: str, rv: RenderedVideo):
    fdir = out / "frames" / vid
    gdir = out / "gt" / vid
    fdir.mkdir(parents=True, exist_ok=True)
    gdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, fr in enumerate(rv.frames):
        rel = f"frames/{vid}/{k:05d}.png"
        Image.fromarray(fr).save(out / rel, format="PNG")
        paths.append(rel)
    if rv.flows is not None:
        for k, fl in enumerate(rv.flows):
            write_flo(gdir / f"flow_{k:05d}.flo", fl)
    np.save(gdir / "masks.npy", rv.masks)
    (gdir / "meta.json").write_text(json.dumps({
        "homographies": rv.homographies.tolist(),
        "boxes": rv.boxes,
        "segments": rv.segments,
    }))
    return paths, [int(x) for x in rv.labels]


def load_ground_truth(root, video_id):
    """(meta dict, masks) written by the generator for one video."""
    gdir = Path(root) / "gt" / video_id
    meta = json.loads((gdir / "meta.json").read_text())
    return meta, np.load(gdir / "masks.npy")


def single_video(config: SynthConfig, labels_and_lengths, seed: int = 0) -> RenderedVideo:
    """Render one in-memory video from explicit (label, length) segments."""
    segs, t = [], 0
    for lab, n in labels_and_lengths:
        segs.append(Segment(int(lab), t, int(n)))
        t += n
    cfg = replace(config, frames_per_video=t)
    srng = np.random.default_rng([seed, 0])
    return render_video(cfg, segs, np.random.default_rng([seed, 1]), subject_rng=srng)
