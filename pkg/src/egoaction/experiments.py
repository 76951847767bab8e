"""Studies built on top of the pipeline stages.

Each study reuses the content-addressed cache of a :class:`pipeline.Context`,
so models trained for the main benchmark are not trained again.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import pipeline as pl
from .ego_compensation import CompensationParams, compensate_sequence, induced_flow
from .evaluation import propagate, score, splice_posteriors
from .optical_flow import FlowParams, compute_flow
from .preprocessing import make_splices
from .synth import ClassSpec, SynthConfig, default_classes, load_ground_truth, single_video
from .training import CurriculumSchedule, curriculum_merge, merge_probs, train_stream


def _posteriors(model, x):
    splices = make_splices(np.zeros(len(x), np.intp), model.cfg.W, "eval")
    return splices, splice_posteriors(model, x, splices)


def stream_loso(ctx: pl.Context, stream: str):
    """Train (if not cached) and score one stream over every LOSO split.

    Returns the pooled confusion matrix.
    """
    m = pl.resolve_manifest(ctx)
    sm = pl.stream_manifest(ctx, m, stream, build=True)
    pred, gt = [], []
    for split in pl._splits(ctx, m):
        stats = pl.get_stats(ctx, m, sm, stream, split)
        model = stream_model(ctx, m, sm, stream, split, stats)
        for vid in split.test_videos:
            x = pl.eval_tensor(ctx, m, sm, stream, split, vid, stats)
            splices, probs = _posteriors(model, x)
            pred.append(propagate(splices, probs.argmax(1), len(x)))
            gt.append(np.asarray(m.video(vid).frame_labels))
    return score(np.concatenate(pred), np.concatenate(gt), m.label_map.names)


def object_area(ctx: pl.Context) -> float:
    """Largest fraction of the frame covered by an object-class mask."""
    m = pl.resolve_manifest(ctx)
    objs = pl.object_classes(ctx.cfg, m)
    worst = 0.0
    for v in m.videos:
        _, masks = load_ground_truth(m.root, v.video_id)
        lab = np.asarray(v.frame_labels)
        sel = masks[np.isin(lab, objs)]
        if len(sel):
            worst = max(worst, float(sel.reshape(len(sel), -1).mean(1).max()))
    return worst


def object_scale_study(cfg: pl.PipelineConfig, jobs: int = 1) -> dict:
    """RGB-only LOSO accuracy with and without the crop-to-larger resize."""
    out = {}
    for resize in (True, False):
        ctx = pl.Context(replace(cfg, resize=resize), jobs=jobs)
        pl.stage_synth(ctx)
        cm = stream_loso(ctx, "rgb")
        out["resize" if resize else "no_resize"] = cm.accuracy
    out["object_area"] = object_area(ctx)
    return out


def curriculum_study(ctx: pl.Context, pair=("open", "close"), stream="flow",
                     phase1_iterations: int | None = None) -> dict:
    """Merge ``pair`` for the first phase of training, then split it.

    The baseline is the stream trained by the pipeline with the same
    configuration and seed but no curriculum, so both see the same number of
    iterations.  Returns merged-label accuracies of the phase-1 model and of
    the freshly split model (re-merged for scoring), and the accuracy on the
    pair's frames for the final and the baseline model.
    """
    cfg = ctx.cfg
    m = pl.resolve_manifest(ctx)
    sm = pl.stream_manifest(ctx, m, stream, build=True)
    tcfg = cfg.training(stream)
    total = tcfg.cnn_iterations + tcfg.lstm_iterations
    # default: split halfway through the recurrent stage, so phase 1 ends with a
    # complete splice classifier over the merged labels
    if phase1_iterations is None:
        phase1_iterations = tcfg.cnn_iterations + tcfg.lstm_iterations // 2
    p1 = phase1_iterations
    sched = CurriculumSchedule((tuple(pair),), p1, total - p1)
    merged_map, mapping = curriculum_merge(m.label_map, sched.merge_pairs)
    pair_idx = [m.label_map.index(c) for c in pair]
    acc = {k: [0, 0] for k in ("phase1", "split", "final_pair", "baseline_pair")}

    def tally(key, pred, gt):
        acc[key][0] += int((pred == gt).sum())
        acc[key][1] += len(gt)

    for split in pl._splits(ctx, m):
        stats = pl.get_stats(ctx, m, sm, stream, split)
        seed = pl.derive_seed(cfg.seed, "train", stream, split.held_out_subject)
        mcfg = replace(cfg.model_for(stream), num_classes=m.label_map.L, seed=seed)
        res = train_stream(sm, split, mcfg, pl.stream_crop(ctx, stream),
                           replace(tcfg, seed=seed), sched, stats, cfg.resize, stream)
        baseline = stream_model(ctx, m, sm, stream, split, stats)
        for vid in split.test_videos:
            x = pl.eval_tensor(ctx, m, sm, stream, split, vid, stats)
            gt = np.asarray(m.video(vid).frame_labels)
            T = len(x)
            splices, p = _posteriors(res.phase1_model, x)
            tally("phase1", propagate(splices, p.argmax(1), T), mapping[gt])
            _, p = _posteriors(res.split_model, x)
            tally("split", propagate(splices, merge_probs(p, mapping, merged_map.L).argmax(1), T),
                  mapping[gt])
            on_pair = np.isin(gt, pair_idx)
            for key, model in (("final_pair", res.model), ("baseline_pair", baseline)):
                _, p = _posteriors(model, x)
                tally(key, propagate(splices, p.argmax(1), T)[on_pair], gt[on_pair])
    return {k: c / n if n else None for k, (c, n) in acc.items()} | {
        "phase1_iterations": p1, "phase2_iterations": total - p1}


def stream_model(ctx, m, sm, stream, split, stats):
    """The pipeline's model for one split, trained on demand."""
    d = pl.checkpoint_dir(ctx, m, sm, stream, split, stats)
    if not ctx.is_done(d):
        digest, loss = pl._train_one((ctx.cfg, sm, split, stream, stats,
                                      pl.stream_crop(ctx, stream), d))
        ctx.mark_done(d, {"checkpoint_sha256": digest, "final_loss": loss})
    return pl.load_stream(ctx, m, sm, stream, split)


# -- ego-motion compensation against generator ground truth ---------------------

def compensation_study(seeds=range(4), frames: int = 10, estimated: bool = True,
                       flow_params: FlowParams | None = None,
                       params: CompensationParams = CompensationParams()) -> dict:
    """Per-sequence compensation errors on generated head-motion sequences.

    ``estimated`` chooses the input flow: Horn-Schunck on the rendered frames,
    or the generator's exact flow.  The reference for the object region is the
    input flow minus the field induced by the true homography, so only the
    error of the fitted homography is measured.  Sequences without an object
    report the median compensated magnitude; sequences with a moving object
    report the background median and sum|c - r| / sum|r| over object pixels.
    """
    cfg = SynthConfig(classes=(ClassSpec("still", None),) + default_classes(),
                      frames_per_video=frames, segment_length=(frames, frames))
    moving = [i for i, c in enumerate(cfg.classes) if any(c.motion)]
    pure, background, obj = [], [], []
    for seed in seeds:
        for lab in [0] + moving:
            rv = single_video(cfg, [(lab, frames)], seed=seed)
            if estimated:
                flows = [compute_flow(a / 255.0, b / 255.0, flow_params)
                         for a, b in zip(rv.frames[:-1], rv.frames[1:])]
            else:
                flows = list(rv.flows)
            comp, _ = compensate_sequence(flows, params)
            mags, bg, num, den = [], [], 0.0, 0.0
            for k, (f, c) in enumerate(zip(flows, comp)):
                mag = np.hypot(c[..., 0], c[..., 1])
                mask = rv.masks[k] > 0
                if lab == 0:
                    mags.append(mag.ravel())
                    continue
                bg.append(mag[~mask])
                r = (f - induced_flow(rv.homographies[k], f.shape))[mask]
                num += np.linalg.norm(c[mask] - r, axis=1).sum()
                den += np.linalg.norm(r, axis=1).sum()
            if lab == 0:
                pure.append(float(np.median(np.concatenate(mags))))
            else:
                background.append(float(np.median(np.concatenate(bg))))
                obj.append(num / den if den > 0 else 0.0)
    return {"pure_median": pure, "background_median": background, "object_rel_error": obj}
