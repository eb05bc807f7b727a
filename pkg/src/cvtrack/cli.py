"""Command-line entry point: synth, train, track, eval, gradcheck.

Every subcommand takes --config (JSON) plus repeatable --set dotted-key
overrides, resolves its seed from --seed, the MCTR_SEED environment
variable, or the config (in that order), and echoes the effective config
into its output directory.  Exit codes: 0 success, 1 usage/config,
2 data, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .config import (
    RunConfig,
    apply_overrides,
    echo_config,
    load_config,
    resolve_seed,
)
from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    DataError,
    GenerationError,
    NumericalAbort,
)
from .gradcheck import run_suite
from .infer import run_sequence, write_prediction_csvs
from .metrics import (
    build_report,
    evaluate_clip,
    format_table,
    gt_view_frames,
    load_predictions_csv,
    write_report,
)
from .model import TrackingModel
from .scene import generate_scene, load_dataset, save_dataset
from .train import load_checkpoint, run_training


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise ConfigError(message)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.set or [])
    seed = resolve_seed(cfg, args.seed)
    cfg.seed = seed
    return cfg


def _scene_files(path: str) -> list[str]:
    if os.path.isfile(path):
        return [path]
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".jsonl")
        )
        if files:
            return files
    raise DataError(f"no dataset files found at {path}")


def _gen_one(scene_cfg):
    return generate_scene(scene_cfg)


def _str2bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    if args.views is not None:
        cfg.scene.num_views = args.views
        cfg.model.num_views = args.views
    if args.objects is not None:
        cfg.scene.num_objects = args.objects
    if args.frames is not None:
        cfg.scene.num_frames = args.frames
    if args.scenes is not None:
        cfg.num_scenes = args.scenes
    if args.workers is not None:
        cfg.workers = args.workers
    out = args.out
    if os.path.exists(out) and os.listdir(out) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    os.makedirs(os.path.join(out, "train"), exist_ok=True)
    os.makedirs(os.path.join(out, "val"), exist_ok=True)

    n = cfg.num_scenes
    n_val = max(1, round(n * cfg.val_frac)) if n > 1 else 0
    base = cfg.seed + cfg.scene.seed
    scene_cfgs = [replace(cfg.scene, seed=base + i) for i in range(n)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            scenes = list(pool.map(_gen_one, scene_cfgs))
    else:
        scenes = [generate_scene(sc) for sc in scene_cfgs]

    for i, ds in enumerate(scenes):
        split = "val" if i >= n - n_val else "train"
        save_dataset(ds, os.path.join(out, split, f"scene_{i:03d}.jsonl"))
    echo_config(cfg, out)
    print(f"wrote {n - n_val} train / {n_val} val scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.stage1_epochs is not None:
        cfg.train.stage1_epochs = args.stage1_epochs
    if args.stage2_epochs is not None:
        cfg.train.stage2_epochs = args.stage2_epochs
    if args.freeze_detector is not None:
        cfg.train.freeze_detector_in_stage2 = _str2bool(args.freeze_detector)
    scenes = [load_dataset(f) for f in _scene_files(os.path.join(args.data, "train"))]
    model = TrackingModel(cfg.model, seed=cfg.seed)
    cfg.train.seed = cfg.train.seed + cfg.seed
    echo_config(cfg, args.out)
    result = run_training(
        model,
        scenes,
        cfg,
        args.out,
        resume=args.resume,
        stage2_clip_budget=args.stage2_clip_budget,
    )
    print(
        f"trained {result.epochs_run} epochs ({result.steps} steps); "
        f"final checkpoint: {result.final_checkpoint}"
    )
    return 0


def cmd_track(args) -> int:
    cfg = _load_cfg(args)
    if args.mode:
        cfg.infer.output_mode = args.mode
    cfg.infer.validate()
    model = TrackingModel(cfg.model, seed=cfg.seed)
    load_checkpoint(model, None, args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    echo_config(cfg, args.out)
    for path in _scene_files(args.data):
        ds = load_dataset(path)
        frames, stats = run_sequence(ds, model, cfg.infer)
        stem = os.path.splitext(os.path.basename(path))[0]
        scene_out = os.path.join(args.out, stem)
        write_prediction_csvs(frames, scene_out, model.cfg.num_views, cfg.infer.canvas)
        with open(os.path.join(scene_out, "timing.json"), "w") as fh:
            json.dump(stats, fh, indent=2)
        print(f"{stem}: {stats['frames']} frames, {stats['mean_ms']:.2f} ms/frame")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    gt_files = _scene_files(args.gt)
    clips = []
    for path in gt_files:
        ds = load_dataset(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        pred_dir = os.path.join(args.preds, stem)
        if not os.path.isdir(pred_dir) and len(gt_files) == 1:
            pred_dir = args.preds  # single-scene layout: CSVs sit at the top
        preds_by_view = []
        gts_by_view = []
        for v in range(ds.num_views):
            csv_path = os.path.join(pred_dir, f"view_{v}.csv")
            if not os.path.exists(csv_path):
                raise DataError(f"missing predictions for view {v}: {csv_path}")
            preds_by_view.append(load_predictions_csv(csv_path, cfg.infer.canvas))
            gts_by_view.append(gt_view_frames(ds, v))
        clips.append(
            evaluate_clip(stem, preds_by_view, gts_by_view, cfg.eval.iou_min, cfg.eval.pair_average)
        )
    report = build_report(clips)
    out_dir = args.out or args.preds
    os.makedirs(out_dir, exist_ok=True)
    write_report(report, os.path.join(out_dir, "report.json"))
    echo_config(cfg, out_dir)
    print(format_table(report))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    report = run_suite(seed=cfg.seed, corrupt_op=args.corrupt)
    print(report.format())
    return 0 if report.passed else 1


def build_parser() -> _Parser:
    parser = _Parser(prog="cvtrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate synthetic multi-camera scenes")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--views", type=int, help="cameras per scene")
    p.add_argument("--objects", type=int, help="objects per scene")
    p.add_argument("--frames", type=int, help="frames per scene")
    p.add_argument("--scenes", type=int, help="number of scenes")
    p.add_argument("--workers", type=int, help="parallel scene generation")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run the two-stage training protocol")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stage2-clip-budget", type=int, default=None, help="exact stage-2 step budget")
    p.add_argument("--stage1-epochs", type=int, default=None)
    p.add_argument("--stage2-epochs", type=int, default=None)
    p.add_argument("--freeze-detector", default=None, metavar="BOOL")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("track", help="online inference, writes per-view CSVs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="scene file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["detection_boxes", "track_boxes"])
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--preds", required=True, help="directory produced by track")
    p.add_argument("--gt", required=True, help="scene file or directory")
    p.add_argument("--out", help="report directory (defaults to --preds)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    common(p)
    p.add_argument("--corrupt", help="deliberately break one op's backward (negative control)")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, GenerationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
