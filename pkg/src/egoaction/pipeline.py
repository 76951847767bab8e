"""End-to-end pipeline with content-addressed caching.

Stages: synth -> flow -> compensate -> preprocess (flow images, dataset
statistics, evaluation tensors) -> train -> eval -> gradcam -> report.
Every stage output lives in a cache directory named by a hash of its
inputs and configuration, so repeating a stage with unchanged inputs is a
cache hit and changing e.g. the flow parameters invalidates only the flow
products.  Run outputs (reports, heatmaps) go to a per-run directory.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset_io import DatasetManifest, VideoRecord, load_manifest, loso_splits, write_manifest
from .ego_compensation import CompensationParams, RansacParams, compensate_sequence
from .evaluation import MissingCheckpoint, loso_evaluate, predict_frames
from .imgops import resize_bilinear
from .model import EncoderConfig, ModelConfig, SpliceClassifier, TwoStreamModel, grad_cam
from .optical_flow import FlowParams, compute_flow, flow_to_color, read_flo, write_flo
from .preprocessing import (CropConfig, DatasetStats, central_crop, crop_offset, load_frame,
                            make_splices, preprocess_batch, read_tensor, write_tensor)
from .synth import SynthConfig, benchmark_config, generate_synthetic_dataset, load_ground_truth
from .training import CurriculumSchedule, StreamData, TrainingConfig, train_stream, write_log

log = logging.getLogger(__name__)

CACHE_ENV = "EGOACTION_CACHE"
STREAMS = ("rgb", "flow")


class PipelineError(RuntimeError):
    kind = "error"

    def __init__(self, msg, stage=None, **details):
        super().__init__(msg)
        self.stage = stage
        self.details = details

    def record(self):
        return {"error": self.kind, "stage": self.stage, "message": str(self), **self.details}


class ConfigError(PipelineError):
    kind = "config_error"


class DependencyError(PipelineError):
    kind = "dependency_missing"

    def __init__(self, msg, stage=None, needs=None, **details):
        super().__init__(msg, stage, needs=needs, **details)


# -- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    manifest: str | None = None  # an existing dataset; otherwise `synth` generates one
    cache_dir: str | None = None  # default: $EGOACTION_CACHE, then ./.egoaction_cache
    output_dir: str = "runs"
    synth: SynthConfig | None = None
    crop: CropConfig = CropConfig(48, 48, 36, 48)
    flow: FlowParams = FlowParams()
    compensation: CompensationParams = CompensationParams()
    compensate: bool = True
    flow_max_norm: float = 1.5  # fixed colour scale shared by every flow image
    resize: bool = True
    model: ModelConfig = ModelConfig()
    # conv blocks of one stream's encoder when they differ from model.encoder.blocks
    rgb_blocks: tuple | None = None
    flow_blocks: tuple | None = None
    training_rgb: TrainingConfig = TrainingConfig()
    training_flow: TrainingConfig = TrainingConfig()
    curriculum: CurriculumSchedule | None = None
    curriculum_streams: tuple = ("rgb",)
    fusion_mode: str = "mean"
    fusion_lambda: float = 0.5
    subjects: tuple | None = None  # held-out subjects to run; None = all
    gradcam_frames: int = 40

    def to_json(self):
        return _jsonable(self)

    def hash(self) -> str:
        """Identity of the run's content; where outputs are stored does not count."""
        d = self.to_json()
        for k in ("cache_dir", "output_dir"):
            d.pop(k)
        return _hash(d)

    def training(self, stream):
        return self.training_rgb if stream == "rgb" else self.training_flow

    def model_for(self, stream) -> ModelConfig:
        blocks = self.rgb_blocks if stream == "rgb" else self.flow_blocks
        if blocks is None:
            return self.model
        return replace(self.model, encoder=replace(self.model.encoder, blocks=blocks))


def toy_training(stream: str) -> TrainingConfig:
    """Schedules for the 64x64 synthetic benchmark."""
    return TrainingConfig(base_lr=0.01, cnn_iterations=1000, cnn_lr_step=400,
                          lstm_iterations=800, lstm_lr_step=400,
                          cnn_batch_size=16, batch_size=16, feature_views=4)


# one pooling stage fewer: Grad-CAM of the RGB stream on a 24x24 grid instead of 12x12
FINE_BLOCKS = ((8, 3, 1, 2), (16, 3, 1, 1), (16, 3, 1, 2))


def toy_config(**kw) -> PipelineConfig:
    kw.setdefault("synth", benchmark_config())
    kw.setdefault("rgb_blocks", FINE_BLOCKS)
    kw.setdefault("training_rgb", toy_training("rgb"))
    kw.setdefault("training_flow", toy_training("flow"))
    return PipelineConfig(**kw)


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return {f.name: _jsonable(getattr(x, f.name)) for f in fields(x)}
    if isinstance(x, (tuple, list)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "synth": SynthConfig, "crop": CropConfig, "flow": FlowParams,
    "compensation": CompensationParams, "model": ModelConfig,
    "training_rgb": TrainingConfig, "training_flow": TrainingConfig,
    "curriculum": CurriculumSchedule,
}
_NESTED = {(CompensationParams, "ransac"): RansacParams, (ModelConfig, "encoder"): EncoderConfig}


def _build(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a table, got {type(d).__name__}", key=path)
    names = {f.name for f in fields(cls)}
    kw = {}
    for k, v in d.items():
        key = f"{path}.{k}" if path else k
        if k not in names:
            raise ConfigError(f"{key}: unknown key", key=key)
        sub = _NESTED.get((cls, k))
        kw[k] = _build(sub, v, key) if sub is not None else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}", key=path) from e


def config_from_dict(d: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay a nested dict on ``base`` (default: the toy configuration)."""
    base = base or toy_config()
    names = {f.name for f in fields(PipelineConfig)}
    kw = {}
    for k, v in d.items():
        if k not in names:
            raise ConfigError(f"{k}: unknown key", key=k)
        if k in _SECTIONS and v is not None:
            cur = getattr(base, k)
            merged = _jsonable(cur) if cur is not None else {}
            merged.update(v)
            kw[k] = _build(_SECTIONS[k], merged, k)
        elif k in ("curriculum_streams", "subjects") and v is not None:
            kw[k] = tuple(v)
        elif k in ("rgb_blocks", "flow_blocks") and v is not None:
            kw[k] = tuple(tuple(b) for b in v)
        else:
            kw[k] = v
    try:
        cfg = replace(base, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if cfg.fusion_mode not in ("mean", "weighted"):
        raise ConfigError(f"fusion_mode: unknown mode {cfg.fusion_mode!r}", key="fusion_mode")
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed: must be an integer", key="seed")
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    return config_from_dict(d)


def derive_seed(seed: int, *parts) -> int:
    """Stage seed: hash of the top-level seed and the stage name (and keys)."""
    h = hashlib.sha256(json.dumps([seed, *parts]).encode()).digest()
    return int.from_bytes(h[:4], "little")


# -- run context ----------------------------------------------------------------------

class Context:
    """Resolved paths, cache bookkeeping and the per-run output directory."""

    def __init__(self, cfg: PipelineConfig, jobs: int = 1, run_dir=None):
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        root = cfg.cache_dir or os.environ.get(CACHE_ENV) or ".egoaction_cache"
        self.cache = Path(root)
        self.cache.mkdir(parents=True, exist_ok=True)
        if run_dir is None:
            stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
            run_dir = Path(cfg.output_dir) / f"{cfg.hash()[:12]}-{stamp}"
        self.run_dir = Path(run_dir)
        self.hits = {}
        self._video_hashes = {}

    def entry(self, stage, key) -> Path:
        return self.cache / stage / key[:24]

    def is_done(self, d: Path) -> bool:
        return (d / "_done.json").exists()

    def mark_done(self, d: Path, info=None):
        (d / "_done.json").write_text(json.dumps(info or {}, sort_keys=True))

    def count(self, stage, hit: bool):
        h = self.hits.setdefault(stage, {"items": 0, "cache_hits": 0})
        h["items"] += 1
        h["cache_hits"] += int(hit)

    def video_hash(self, manifest, vid) -> str:
        key = (id(manifest), vid)
        if key not in self._video_hashes:
            h = hashlib.sha256()
            for p in manifest.video(vid).frame_paths:
                h.update(manifest.frame_path(p).read_bytes())
            self._video_hashes[key] = h.hexdigest()
        return self._video_hashes[key]


def _pmap(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# -- stages ------------------------------------------------------------------------

def stage_synth(ctx: Context) -> dict:
    cfg = ctx.cfg
    if cfg.synth is None:
        raise ConfigError("no [synth] section: nothing to generate", stage="synth", key="synth")
    seed = derive_seed(cfg.seed, "synth")
    d = ctx.entry("synth", _hash([cfg.synth.to_json(), seed]))
    hit = ctx.is_done(d)
    if not hit:
        generate_synthetic_dataset(cfg.synth, seed, d, jobs=ctx.jobs)
        ctx.mark_done(d)
    ctx.count("synth", hit)
    return {"manifest": str(d / "manifest.jsonl"), "cache_hit": hit}


def resolve_manifest(ctx: Context, stage=None) -> DatasetManifest:
    cfg = ctx.cfg
    if cfg.manifest:
        if not Path(cfg.manifest).exists():
            raise DependencyError(f"manifest not found: {cfg.manifest}", stage, needs="manifest")
        return load_manifest(cfg.manifest)
    if cfg.synth is None:
        raise ConfigError("config needs either 'manifest' or a 'synth' section", stage)
    d = ctx.entry("synth", _hash([cfg.synth.to_json(), derive_seed(cfg.seed, "synth")]))
    if not ctx.is_done(d):
        raise DependencyError("synthetic dataset not generated; run `synth` first", stage,
                              needs="synth")
    return load_manifest(d / "manifest.jsonl")


def _flow_key(ctx, manifest, vid):
    c = ctx.cfg
    return _hash(["flow", ctx.video_hash(manifest, vid), c.crop.central_M, c.crop.central_N,
                  _jsonable(c.flow)])


def _comp_key(ctx, manifest, vid):
    c = ctx.cfg
    return _hash(["comp", _flow_key(ctx, manifest, vid), c.compensate, _jsonable(c.compensation),
                  derive_seed(c.seed, "compensate", vid)])


def _flowimg_key(ctx, manifest, vid):
    return _hash(["flowimg", _comp_key(ctx, manifest, vid), ctx.cfg.flow_max_norm])


def _video_flows(job):
    paths, M, N, params = job
    frames = [central_crop(load_frame(p), M, N) for p in paths]
    return [compute_flow(a, b, params) for a, b in zip(frames[:-1], frames[1:])]


def stage_flow(ctx: Context) -> dict:
    """Raw flow between consecutive central-cropped frames, one .flo per pair."""
    m = resolve_manifest(ctx, "flow")
    c = ctx.cfg
    todo = []
    for v in m.videos:
        d = ctx.entry("flow", _flow_key(ctx, m, v.video_id))
        hit = ctx.is_done(d)
        ctx.count("flow", hit)
        if not hit:
            todo.append((v, d))
    jobs = [([str(m.frame_path(p)) for p in v.frame_paths], c.crop.central_M, c.crop.central_N,
             c.flow) for v, _ in todo]
    for (v, d), flows in zip(todo, _pmap(_video_flows, jobs, ctx.jobs)):
        d.mkdir(parents=True, exist_ok=True)
        for k, fl in enumerate(flows):
            write_flo(d / f"{k:05d}.flo", fl)
        ctx.mark_done(d, {"video_id": v.video_id, "pairs": len(flows)})
    return dict(ctx.hits["flow"])


def _read_flows(d: Path, n):
    return [read_flo(d / f"{k:05d}.flo") for k in range(n)]


def stage_compensate(ctx: Context) -> dict:
    m = resolve_manifest(ctx, "compensate")
    c = ctx.cfg
    summary = []
    for v in m.videos:
        src = ctx.entry("flow", _flow_key(ctx, m, v.video_id))
        if not ctx.is_done(src):
            raise DependencyError(f"no flow for video {v.video_id}; run `flow` first",
                                  "compensate", needs="flow")
        d = ctx.entry("compensate", _comp_key(ctx, m, v.video_id))
        hit = ctx.is_done(d)
        ctx.count("compensate", hit)
        if not hit:
            flows = _read_flows(src, len(v) - 1)
            if c.compensate:
                seed = derive_seed(c.seed, "compensate", v.video_id)
                params = replace(c.compensation, ransac=replace(c.compensation.ransac, seed=seed))
                flows, reports = compensate_sequence(flows, params)
            else:
                reports = []
            d.mkdir(parents=True, exist_ok=True)
            for k, fl in enumerate(flows):
                write_flo(d / f"{k:05d}.flo", fl)
            with open(d / "fit_report.jsonl", "w") as f:
                for r in reports:
                    f.write(json.dumps(r) + "\n")
            ctx.mark_done(d)
        reports = [json.loads(x) for x in (d / "fit_report.jsonl").read_text().splitlines()]
        summary.append(sum(r["fallback"] for r in reports))
    out = dict(ctx.hits["compensate"])
    out["fallback_frames"] = int(sum(summary))
    return out


def flow_manifest(ctx: Context, m: DatasetManifest, build=True) -> DatasetManifest:
    """Manifest of rendered flow images (one per frame; the last frame repeats the last pair)."""
    videos = []
    for v in m.videos:
        d = ctx.entry("flowimg", _flowimg_key(ctx, m, v.video_id))
        if not ctx.is_done(d):
            if not build:
                raise DependencyError(f"no flow images for {v.video_id}; run `preprocess` first",
                                      needs="preprocess")
            src = ctx.entry("compensate", _comp_key(ctx, m, v.video_id))
            if not ctx.is_done(src):
                raise DependencyError(f"no compensated flow for {v.video_id}; run `compensate` "
                                      "first", "preprocess", needs="compensate")
            d.mkdir(parents=True, exist_ok=True)
            flows = _read_flows(src, len(v) - 1)
            flows.append(flows[-1])
            for k, fl in enumerate(flows):
                Image.fromarray(flow_to_color(fl, ctx.cfg.flow_max_norm)).save(d / f"{k:05d}.png")
            ctx.mark_done(d)
            ctx.count("flowimg", False)
        else:
            ctx.count("flowimg", True)
        videos.append(VideoRecord(v.video_id, v.subject,
                                  [str((d / f"{k:05d}.png").resolve()) for k in range(len(v))],
                                  v.frame_labels))
    return DatasetManifest(videos, m.label_map, f"{m.name}-flow", categories=m.categories)


def stream_crop(ctx: Context, stream) -> CropConfig:
    """Flow images are already central crops."""
    c = ctx.cfg.crop
    if stream == "flow":
        return replace(c, central_M=min(c.central_M, c.central_N),
                       central_N=min(c.central_M, c.central_N))
    return c


def stream_manifest(ctx, m, stream, build=False):
    return m if stream == "rgb" else flow_manifest(ctx, m, build)


def _stream_key(ctx, m, stream):
    if stream == "rgb":
        return _hash([ctx.video_hash(m, v.video_id) for v in m.videos])
    return _hash([_flowimg_key(ctx, m, v.video_id) for v in m.videos])


def _splits(ctx, m):
    sp = loso_splits(m)
    if ctx.cfg.subjects is not None:
        sp = [s for s in sp if s.held_out_subject in ctx.cfg.subjects]
    return sp


def _stats_path(ctx, m, stream, split):
    key = _hash(["stats", _stream_key(ctx, m, stream), split.train_videos,
                 _jsonable(stream_crop(ctx, stream))])
    return ctx.entry("stats", key).with_suffix(".json")


def get_stats(ctx, m, sm, stream, split, build=True) -> DatasetStats:
    p = _stats_path(ctx, m, stream, split)
    if p.exists():
        ctx.count("stats", True)
        return DatasetStats.from_json(json.loads(p.read_text()))
    if not build:
        raise DependencyError(f"no statistics for split {split.held_out_subject}; run `stats`",
                              needs="stats")
    stats = StreamData(sm, split.train_videos, stream_crop(ctx, stream)).stats()
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(stats.to_json()))
    ctx.count("stats", False)
    return stats


def stage_stats(ctx: Context) -> dict:
    m = resolve_manifest(ctx, "stats")
    out = {}
    for stream in STREAMS:
        sm = stream_manifest(ctx, m, stream, build=True)
        for split in _splits(ctx, m):
            s = get_stats(ctx, m, sm, stream, split)
            out[f"{stream}/{split.held_out_subject}"] = {"mean": s.mean.tolist(),
                                                         "var": s.var.tolist(), "hash": s.hash()}
    return out


def _tensor_path(ctx, m, stream, split, vid):
    return ctx.entry("tensors", _hash(["t", _stream_key(ctx, m, stream), split.train_videos, vid,
                                       _jsonable(stream_crop(ctx, stream)), ctx.cfg.resize])
                     ) / "video"


def eval_tensor(ctx, m, sm, stream, split, vid, stats):
    """Centre-crop evaluation tensor (T, C, S, S) of one video, cached per stats hash."""
    p = _tensor_path(ctx, m, stream, split, vid)
    arr = read_tensor(p, expect_stats_hash=stats.hash())
    if arr is not None:
        ctx.count("tensors", True)
        return arr
    crop = stream_crop(ctx, stream)
    frames = np.stack([central_crop(load_frame(sm.frame_path(f)), crop.central_M, crop.central_N)
                       for f in sm.video(vid).frame_paths])
    off = np.tile(crop_offset(frames.shape[1:], crop.crop_size), (len(frames), 1))
    arr = preprocess_batch(frames, crop, stats, off, ctx.cfg.resize)
    p.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(p, arr, stats_hash=stats.hash(), video_id=vid, stream=stream)
    ctx.count("tensors", False)
    return arr


def stage_preprocess(ctx: Context) -> dict:
    m = resolve_manifest(ctx, "preprocess")
    sms = {s: stream_manifest(ctx, m, s, build=True) for s in STREAMS}
    for stream in STREAMS:
        for split in _splits(ctx, m):
            stats = get_stats(ctx, m, sms[stream], stream, split)
            for vid in split.test_videos:
                eval_tensor(ctx, m, sms[stream], stream, split, vid, stats)
    return {k: ctx.hits[k] for k in ("flowimg", "stats", "tensors") if k in ctx.hits}


def _train_key(ctx, m, stream, split, stats):
    c = ctx.cfg
    cur = c.curriculum if (c.curriculum and stream in c.curriculum_streams) else None
    return _hash(["train", _stream_key(ctx, m, stream), split.train_videos, stats.hash(),
                  _jsonable(stream_crop(ctx, stream)), c.resize, _jsonable(c.model_for(stream)),
                  _jsonable(c.training(stream)), _jsonable(cur),
                  derive_seed(c.seed, "train", stream, split.held_out_subject)])


def checkpoint_dir(ctx, m, sm, stream, split, stats=None):
    stats = stats or get_stats(ctx, m, sm, stream, split, build=False)
    return ctx.entry("train", _train_key(ctx, m, stream, split, stats))


def _train_one(job):
    cfg, sm, split, stream, stats, crop, d = job
    seed = derive_seed(cfg.seed, "train", stream, split.held_out_subject)
    tcfg = replace(cfg.training(stream), seed=seed)
    mcfg = replace(cfg.model_for(stream), num_classes=sm.label_map.L, seed=seed)
    cur = cfg.curriculum if (cfg.curriculum and stream in cfg.curriculum_streams) else None
    res = train_stream(sm, split, mcfg, crop, tcfg, cur, stats, cfg.resize, stream)
    d.mkdir(parents=True, exist_ok=True)
    digest = res.model.save(d / "model", stream=stream, split=split.held_out_subject,
                            label_names=list(sm.label_map.names), stats_hash=stats.hash())
    write_log(res.log, d / "train_log.jsonl")
    return digest, res.log[-1]["loss"] if res.log else None


def stage_train(ctx: Context) -> dict:
    m = resolve_manifest(ctx, "train")
    out, jobs = {}, []
    for stream in STREAMS:
        sm = stream_manifest(ctx, m, stream, build=False)
        for split in _splits(ctx, m):
            stats = get_stats(ctx, m, sm, stream, split)
            d = checkpoint_dir(ctx, m, sm, stream, split, stats)
            hit = ctx.is_done(d)
            ctx.count("train", hit)
            name = f"{stream}/{split.held_out_subject}"
            if hit:
                out[name] = json.loads((d / "_done.json").read_text())
            else:
                jobs.append((name, (ctx.cfg, sm, split, stream, stats, stream_crop(ctx, stream), d)))
    for (name, job), (digest, loss) in zip(jobs, _pmap(_train_one, [j for _, j in jobs], ctx.jobs)):
        info = {"checkpoint_sha256": digest, "final_loss": loss}
        ctx.mark_done(job[-1], info)
        out[name] = info
    return {"models": out, **ctx.hits["train"]}


def load_stream(ctx, m, sm, stream, split) -> SpliceClassifier:
    try:
        d = checkpoint_dir(ctx, m, sm, stream, split)
    except DependencyError as e:
        raise MissingCheckpoint(f"no {stream} checkpoint for split {split.held_out_subject} "
                                f"({e}); run `train` first") from e
    if not ctx.is_done(d):
        raise MissingCheckpoint(f"no {stream} checkpoint for split {split.held_out_subject}; "
                                "run `train` first")
    model, _ = SpliceClassifier.load(d / "model")
    return model


def stage_eval(ctx: Context, write=True):
    m = resolve_manifest(ctx, "eval")
    try:
        sms = {s: stream_manifest(ctx, m, s) for s in STREAMS}
    except DependencyError as e:
        raise DependencyError(f"{e}; then run `train`", "eval", needs="train") from e
    c = ctx.cfg

    def predictor(split):
        models, tensors = {}, {}
        for s in STREAMS:
            models[s] = load_stream(ctx, m, sms[s], s, split)
            stats = get_stats(ctx, m, sms[s], s, split, build=False)
            tensors[s] = {v: eval_tensor(ctx, m, sms[s], s, split, v, stats)
                          for v in split.test_videos}
        two = TwoStreamModel(models["rgb"], models["flow"], c.fusion_mode, c.fusion_lambda)
        preds = {"rgb": {}, "flow": {}, "combined": {}}
        for v in split.test_videos:
            preds["rgb"][v] = predict_frames(models["rgb"], tensors["rgb"][v], mode="rgb")
            preds["flow"][v] = predict_frames(models["flow"], tensors["flow"][v], mode="flow")
            preds["combined"][v] = predict_frames(two, (tensors["rgb"][v], tensors["flow"][v]),
                                                  mode="combined")
        return preds

    try:
        report = loso_evaluate(m, _splits(ctx, m), predictor)
    except (MissingCheckpoint, DependencyError) as e:
        raise DependencyError(str(e), "eval", needs="train") from e
    report.meta = {"config_hash": c.hash(), "seed": c.seed, "fusion_mode": c.fusion_mode}
    if write:
        report.write(ctx.run_dir)
    return report


def _box_to_input(box, ctx, raw_shape):
    """Map a raw-frame box [x0, y0, x1, y1) into encoder-input pixel coordinates."""
    c = ctx.cfg.crop
    H, W = raw_shape[:2]
    ox = (W - c.central_M) // 2 + (c.central_M - c.crop_size) // 2
    oy = (H - c.central_N) // 2 + (c.central_N - c.crop_size) // 2
    s = (c.resize_to / c.crop_size) if ctx.cfg.resize else 1.0
    S = c.resize_to if ctx.cfg.resize else c.crop_size
    x0, y0, x1, y1 = box
    return [float(np.clip((x0 - ox) * s, 0, S)), float(np.clip((y0 - oy) * s, 0, S)),
            float(np.clip((x1 - ox) * s, 0, S)), float(np.clip((y1 - oy) * s, 0, S))]


def box_mass(cam, box):
    """Fraction of heatmap mass inside a box with fractional edges (area-weighted pixels)."""
    H, W = cam.shape
    x0, y0, x1, y1 = box
    wx = np.clip(np.minimum(np.arange(W) + 1, x1) - np.maximum(np.arange(W), x0), 0, 1)
    wy = np.clip(np.minimum(np.arange(H) + 1, y1) - np.maximum(np.arange(H), y0), 0, 1)
    total = cam.sum()
    return float((wy[:, None] * wx[None, :] * cam).sum() / total) if total > 0 else 0.0


def object_classes(cfg: PipelineConfig, m: DatasetManifest):
    """Classes identified by a static object (shape other than a hand, no motion)."""
    if cfg.synth is None:
        return list(range(m.label_map.L))
    return [i for i, c in enumerate(cfg.synth.classes)
            if c.shape not in (None, "hand") and not any(c.motion)]


def stage_gradcam(ctx: Context) -> dict:
    """Heatmaps for correctly classified object-class frames of every held-out subject.

    Writes 8-bit PNGs (upsampled to the encoder input) and raw float sidecars;
    with generator ground truth, also the fraction of mass in the object box.
    """
    m = resolve_manifest(ctx, "gradcam")
    c = ctx.cfg
    out_dir = ctx.run_dir / "gradcam"
    out_dir.mkdir(parents=True, exist_ok=True)
    objs = set(object_classes(c, m))
    has_gt = c.synth is not None and m.root is not None and (m.root / "gt").exists()
    rng = np.random.default_rng(derive_seed(c.seed, "gradcam"))
    records = []
    for split in _splits(ctx, m):
        try:
            model = load_stream(ctx, m, m, "rgb", split)
        except MissingCheckpoint as e:
            raise DependencyError(str(e), "gradcam", needs="train") from e
        stats = get_stats(ctx, m, m, "rgb", split, build=False)
        cands = []
        for vid in split.test_videos:
            x = eval_tensor(ctx, m, m, "rgb", split, vid, stats)
            labels = np.asarray(m.video(vid).frame_labels)
            pred = predict_frames(model, x, mode="rgb")
            ok = np.nonzero((pred == labels) & np.isin(labels, list(objs)))[0]
            cands += [(vid, int(t)) for t in ok]
        if not cands:
            continue
        pick = rng.choice(len(cands), min(c.gradcam_frames, len(cands)), replace=False)
        for j in sorted(pick):
            vid, t = cands[j]
            x = eval_tensor(ctx, m, m, "rgb", split, vid, stats)
            label = m.video(vid).frame_labels[t]
            W = model.cfg.W
            sp = [s for s in make_splices(np.zeros(len(x), np.intp), W, "eval")
                  if t in s.frame_indices][-1]
            step = sp.frame_indices.index(t)
            cam = grad_cam(model, x[list(sp.frame_indices)], step, label)
            S = x.shape[-1]
            up = np.clip(resize_bilinear(cam, S, S), 0, None)
            name = f"{vid}_{t:05d}"
            Image.fromarray(np.round(255 * up / max(up.max(), 1e-12)).astype(np.uint8),
                            mode="L").save(out_dir / f"{name}.png")
            write_tensor(out_dir / name, up, video_id=vid, frame=t, label=int(label))
            rec = {"video_id": vid, "frame": t, "label": int(label)}
            if has_gt:
                meta, _ = load_ground_truth(m.root, vid)
                box = meta["boxes"][t]
                if box is not None:
                    raw = Image.open(m.frame_path(m.video(vid).frame_paths[t])).size[::-1]
                    ibox = _box_to_input(box, ctx, raw)
                    rec["box"] = ibox
                    rec["mass_in_box"] = box_mass(up, ibox)
            records.append(rec)
    masses = [r["mass_in_box"] for r in records if "mass_in_box" in r]
    summary = {"frames": len(records),
               "mean_mass_in_box": float(np.mean(masses)) if masses else None,
               "records": records}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return {k: v for k, v in summary.items() if k != "records"}


def stage_report(ctx: Context) -> dict:
    from .dataset_io import dataset_summary
    m = resolve_manifest(ctx, "report")
    report = stage_eval(ctx, write=True)
    body = {"dataset": dataset_summary(m), "config": ctx.cfg.to_json(),
            "eval": report.to_json(), "eval_hash": report.hash()}
    (ctx.run_dir / "report.json").write_text(json.dumps(body, indent=1, sort_keys=True))
    lines = [f"# {m.name}", "", "| stream | frame accuracy | average recall |", "|---|---|---|"]
    for mode, res in report.streams.items():
        j = res.to_json()
        lines.append(f"| {mode} | {j['frame_accuracy']:.4f} | {j['average_recall']:.4f} |")
    (ctx.run_dir / "report.md").write_text("\n".join(lines) + "\n")
    return {"eval_hash": report.hash(),
            **{k: v.frame_accuracy for k, v in report.streams.items()}}


STAGES = {
    "synth": stage_synth, "flow": stage_flow, "compensate": stage_compensate,
    "preprocess": stage_preprocess, "stats": stage_stats, "train": stage_train,
    "eval": lambda ctx: _eval_summary(stage_eval(ctx)), "gradcam": stage_gradcam,
    "report": stage_report,
}
ORDER = ("synth", "flow", "compensate", "preprocess", "train", "eval")


def _eval_summary(report):
    return {"eval_hash": report.hash(), "failed_splits": report.failed_splits,
            **{k: v.frame_accuracy for k, v in report.streams.items()}}


def run_stage(ctx: Context, name: str) -> dict:
    if name not in STAGES:
        raise ConfigError(f"unknown command {name!r}")
    t0 = time.perf_counter()
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    result = STAGES[name](ctx)
    dt = time.perf_counter() - t0
    log.info("%s finished in %.1fs", name, dt)
    return {"command": name, "ok": True, "result": result, "seconds": round(dt, 3)}


def run_all(ctx: Context, stages=ORDER) -> dict:
    out = {}
    for s in stages:
        if s == "synth" and ctx.cfg.manifest:
            continue
        out[s] = run_stage(ctx, s)
    return out
