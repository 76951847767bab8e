"""
A whole two-stream run in about a minute
=========================================

Every stage of the pipeline on a deliberately tiny dataset: 32x32 frames,
two subjects, a few hundred training iterations.  The numbers are not
meant to be good; the point is the shape of the run and the cache.
Run it twice and the second pass is all cache hits.
"""
import json
import sys
from pathlib import Path

from egoaction import pipeline as pl

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_tiny")
cfg = pl.config_from_dict({
    "seed": 3,
    "cache_dir": str(work / "cache"),
    "output_dir": str(work / "runs"),
    "synth": {"image_size": 32, "n_subjects": 2, "videos_per_subject": 2,
              "frames_per_video": 72, "segment_length": [12, 16]},
    "crop": {"central_M": 24, "central_N": 24, "crop_size": 20, "resize_to": 24},
    "flow": {"warp_iterations": 1, "solver_iterations": 30},
    "model": {"W": 5, "hidden": 16, "encoder": {"feature_dim": 16}},
    "training_rgb": {"base_lr": 0.01, "cnn_iterations": 300, "cnn_lr_step": 200,
                     "lstm_iterations": 200, "lstm_lr_step": 150, "cnn_batch_size": 8,
                     "batch_size": 8, "feature_views": 2},
    "training_flow": {"base_lr": 0.01, "cnn_iterations": 300, "cnn_lr_step": 200,
                      "lstm_iterations": 200, "lstm_lr_step": 150, "cnn_batch_size": 8,
                      "batch_size": 8, "feature_views": 2},
    "gradcam_frames": 4,
})
ctx = pl.Context(cfg)
for name, rec in pl.run_all(ctx).items():
    print(f"{name:11s} {rec['seconds']:7.2f}s  {json.dumps(rec['result'], default=str)[:100]}")

report = pl.stage_eval(ctx, write=True)
for mode, res in report.streams.items():
    print(f"{mode:9s} frame accuracy {res.frame_accuracy:.3f}")
print("report hash", report.hash()[:16], "written to", ctx.run_dir)

# the same thing from the shell:
#   egoaction all --config tiny.json --cache-dir demo_tiny/cache
