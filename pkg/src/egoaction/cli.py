"""Command-line entry point: one subcommand per pipeline stage.

    egoaction synth --config run.json
    egoaction flow --config run.json --jobs 4
    egoaction eval --config run.json

Each command prints one JSON record on stdout (also saved in the run
directory) and exits 0; on failure it prints a JSON error record and exits
non-zero (2 for configuration errors, 3 for a missing upstream stage).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import replace

from . import pipeline as pl

COMMANDS = ("synth", "flow", "compensate", "preprocess", "stats", "train", "eval", "gradcam",
            "report", "all")
EXIT_CODES = {"config_error": 2, "dependency_missing": 3}


def build_parser():
    p = argparse.ArgumentParser(prog="egoaction", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file (default: the synthetic toy setup)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-video and "
                   "per-split stages")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--deterministic", action="store_true",
                   help="reference mode: single worker, reproducible byte-for-byte reports")
    p.add_argument("--cache-dir", help=f"cache root (default: ${pl.CACHE_ENV} or "
                   "./.egoaction_cache)")
    p.add_argument("--output-dir", help="parent of the run directory")
    p.add_argument("--subjects", nargs="+", help="held-out subjects to run")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _emit(rec, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(rec, sort_keys=True) + "\n")
    stream.flush()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: v for k, v in (("seed", args.seed), ("cache_dir", args.cache_dir),
                                   ("output_dir", args.output_dir),
                                   ("subjects", tuple(args.subjects) if args.subjects else None))
                 if v is not None}
    try:
        cfg = pl.load_config(args.config) if args.config else pl.toy_config()
        cfg = replace(cfg, **overrides)
        jobs = 1 if args.deterministic else args.jobs
        ctx = pl.Context(cfg, jobs=jobs)
        if args.command == "all":
            rec = {"command": "all", "ok": True, "stages": pl.run_all(ctx)}
        else:
            rec = pl.run_stage(ctx, args.command)
        rec.update(run_dir=str(ctx.run_dir), config_hash=cfg.hash(), overrides=overrides,
                   jobs=jobs, deterministic=args.deterministic)
        (ctx.run_dir / f"{args.command}.json").write_text(json.dumps(rec, indent=1,
                                                                     sort_keys=True))
        _emit(rec)
        return 0
    except pl.PipelineError as e:
        rec = {"command": args.command, "ok": False, **e.record()}
        _emit(rec)
        return EXIT_CODES.get(e.kind, 1)
    except Exception as e:  # last-resort record so callers always get JSON
        rec = {"command": args.command, "ok": False, "error": type(e).__name__,
               "message": str(e)}
        if args.verbose:
            traceback.print_exc()
        _emit(rec)
        return 1


if __name__ == "__main__":
    sys.exit(main())
