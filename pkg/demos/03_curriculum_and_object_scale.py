"""
Two small studies: merged-then-split labels, and object scale
==============================================================

``open`` and ``close`` are the same hand moving in opposite directions.
The curriculum trains the flow stream with the two merged into one class,
then splits the output row and keeps training.  Right after the split the
merged decisions must not change.

The second study renders objects covering under 3% of the frame and
compares the RGB stream with and without enlarging the crop.

Both run on reduced settings here (two subjects, short schedules); the
acceptance tests run them at benchmark scale.
"""
import sys
from dataclasses import replace
from pathlib import Path

from egoaction import experiments as ex
from egoaction import pipeline as pl
from egoaction.synth import benchmark_config, small_object_config
from egoaction.training import TrainingConfig

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_studies")
short = TrainingConfig(base_lr=0.01, cnn_iterations=200, cnn_lr_step=100, lstm_iterations=150,
                       lstm_lr_step=100, cnn_batch_size=16, batch_size=16, feature_views=2)
cfg = pl.toy_config(cache_dir=str(work / "cache"), output_dir=str(work / "runs"),
                    synth=benchmark_config(n_subjects=2, videos_per_subject=2,
                                           frames_per_video=120, segment_length=(30, 50)),
                    training_rgb=short, training_flow=short)

ctx = pl.Context(cfg)
for stage in ("synth", "flow", "compensate"):
    pl.run_stage(ctx, stage)
r = ex.curriculum_study(ctx, ("open", "close"), "flow")
print(f"phase 1 ({r['phase1_iterations']} iterations) merged accuracy {r['phase1']:.3f}")
print(f"just after the split, re-merged          {r['split']:.3f}")
print(f"open/close accuracy, curriculum {r['final_pair']:.3f} "
      f"vs trained directly {r['baseline_pair']:.3f}")

small = replace(cfg, synth=small_object_config(n_subjects=2, videos_per_subject=2,
                                               frames_per_video=120, segment_length=(30, 50)))
s = ex.object_scale_study(small)
print(f"objects cover at most {100 * s['object_area']:.2f}% of a frame")
print(f"RGB accuracy: enlarged crop {s['resize']:.3f}, native crop {s['no_resize']:.3f}")
