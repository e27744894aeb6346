"""Command-line entry point exposing all workflows.

Subcommands: prepare-data, augment-preview, train, eval, infer, ensemble,
benchmark. Exit codes: 0 success, 1 validation/usage error, 2 runtime
failure. Every run writes a ``run.log`` with the command line, a version
string, the seed and the fully resolved config, which is enough to
reproduce the run bit-for-bit (timestamps aside).

The environment variable ``DUODET_RUN_DIR`` overrides the checkpoint/log
directory (train's ``checkpoint_dir`` and the default output directory of
``eval``); all other paths come from flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import os
import subprocess
import sys
from pathlib import Path

import yaml

from . import __version__
from .augment import RngStream, apply_pipeline_traced
from .core import (
    Detection,
    ManifestError,
    PairedSample,
    SampleMeta,
    load_manifest,
    load_sample,
    save_detections,
    save_manifest,
)
from .checkpoint import CheckpointError
from .ensemble import ensemble_run
from .ingest import IngestError, import_paired, import_rgb_only
from .traineval import (
    TrainConfig,
    TrainingDivergedError,
    benchmark_fps,
    evaluate_checkpoint,
    infer,
    train,
    train_config_from_dict,
)

SUBCOMMANDS = (
    "prepare-data",
    "augment-preview",
    "train",
    "eval",
    "infer",
    "ensemble",
    "benchmark",
)

_VALIDATION_ERRORS = (ManifestError, IngestError, CheckpointError, ValueError, KeyError)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def version_string() -> str:
    rev = ""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            rev = "+g" + out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"duodet-{__version__}{rev}"


def parse_config(path: str | Path) -> TrainConfig:
    """Load and fully validate a YAML training config.

    Unknown keys anywhere in the file are errors; defaults fill the rest.
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"config root must be a mapping, got {type(raw).__name__}")
    return train_config_from_dict(raw)


def write_run_log(
    out_dir: str | Path, argv: list[str], seed: int | None, config: dict | None
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "run.log"
    lines = [
        f"time: {_dt.datetime.now().isoformat()}",
        f"version: {version_string()}",
        f"argv: duodet {' '.join(argv)}",
    ]
    if seed is not None:
        lines.append(f"seed: {seed}")
    if config is not None:
        lines.append("config:")
        lines.append(yaml.safe_dump(config, sort_keys=True).rstrip())
    log.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return log


def _run_dir_override(default: str | Path) -> Path:
    return Path(os.environ.get("DUODET_RUN_DIR", str(default)))


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_prepare_data(args, argv: list[str]) -> int:
    out = Path(args.out)
    if args.format == "paired":
        manifest = import_paired(Path(args.input).resolve(), split=args.split)
        save_manifest(manifest, out / "manifest.jsonl")
    else:
        manifest = import_rgb_only(
            args.input, out, crop_size=args.crop_size, split=args.split
        )
    write_run_log(out, argv, seed=None, config=None)
    print(f"wrote manifest with {len(manifest)} records to {out / 'manifest.jsonl'}")
    return 0


def cmd_augment_preview(args, argv: list[str]) -> int:
    from .report import render_augment_preview

    manifest = load_manifest(args.manifest)
    if not 0 <= args.sample < len(manifest.records):
        raise ValueError(
            f"--sample {args.sample} outside manifest range [0, {len(manifest.records)})"
        )
    if args.config:
        aug_cfg = parse_config(args.config).aug
    else:
        from .augment import AugmentConfig

        aug_cfg = AugmentConfig(global_seed=args.seed)
    before = load_sample(manifest.records[args.sample], args.manifest)
    rng = RngStream(args.seed, epoch=0, sample_index=args.sample)
    after, trace = apply_pipeline_traced(before, aug_cfg, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    png = render_augment_preview(
        before, after, manifest.class_names,
        out / f"preview_{args.sample:03d}.png",
    )
    write_run_log(out, argv, seed=args.seed, config=dataclasses.asdict(aug_cfg))
    print(f"applied: {trace}")
    print(f"wrote {png}")
    return 0


def cmd_train(args, argv: list[str]) -> int:
    from .report import render_loss_curves

    cfg = parse_config(args.config)
    if "DUODET_RUN_DIR" in os.environ:
        cfg = dataclasses.replace(cfg, checkpoint_dir=os.environ["DUODET_RUN_DIR"])
    manifest = load_manifest(args.manifest)
    log = write_run_log(
        cfg.checkpoint_dir, argv, seed=cfg.seed, config=dataclasses.asdict(cfg)
    )
    try:
        result = train(manifest, cfg, args.manifest)
    except TrainingDivergedError as e:
        with log.open("a", encoding="utf-8") as fh:
            fh.write(f"aborted: {e}\n")
        raise
    render_loss_curves(result.log_path, Path(cfg.checkpoint_dir) / "loss_curves.png")
    print(
        f"trained {result.steps_run} steps, final loss {result.final_loss:.4f}, "
        f"checkpoint at {result.checkpoint_path}"
    )
    return 0


def cmd_eval(args, argv: list[str]) -> int:
    import json

    from .report import render_pr_curves, write_per_class_csv

    out = _run_dir_override(args.out)
    manifest = load_manifest(args.manifest)
    report, detections = evaluate_checkpoint(
        args.checkpoint,
        manifest,
        args.manifest,
        split=args.split,
        input_size=args.size,
        iou_thresh=args.iou,
        conf_thresh=args.conf,
        nms_iou=args.nms_iou,
    )
    out.mkdir(parents=True, exist_ok=True)
    save_detections(detections, out / "detections.det")
    (out / "eval_report.json").write_text(
        json.dumps(
            {
                "iou_thresh": report.iou_thresh,
                "mAP": report.map_value,
                "per_class_ap": {str(k): v for k, v in report.per_class_ap.items()},
                "counts": {
                    str(k): {"tp": v[0], "fp": v[1], "fn": v[2]}
                    for k, v in report.counts.items()
                },
                "wall_clock_sec": report.wall_clock,
            },
            indent=2,
        ),
        encoding="utf-8",
    )
    write_per_class_csv(report, manifest.class_names, out / "per_class_ap.csv")
    render_pr_curves(report, manifest.class_names, out / "pr_curves.png")
    write_run_log(out, argv, seed=None, config=None)
    print(f"mAP@{report.iou_thresh:.2f} = {report.map_value:.4f}")
    return 0


def cmd_infer(args, argv: list[str]) -> int:
    import numpy as np
    from PIL import Image

    rgb = np.asarray(Image.open(args.rgb).convert("RGB"), dtype=np.uint8)
    tir = np.asarray(Image.open(args.tir).convert("L"), dtype=np.uint8)[..., None]
    sample = PairedSample(
        rgb=rgb, tir=tir, boxes=[],
        meta=SampleMeta(source="cli", rgb_id=Path(args.rgb).stem),
    )
    boxes = infer(
        args.checkpoint, sample,
        input_size=args.size, conf_thresh=args.conf, nms_iou=args.nms_iou,
    )
    image_id = Path(args.rgb).stem
    out = Path(args.out)
    save_detections([Detection(image_id=image_id, box=b) for b in boxes], out)
    if args.render:
        from .report import render_detections

        render_detections(sample, boxes, [], Path(args.render))
    write_run_log(out.parent, argv, seed=None, config=None)
    print(f"{len(boxes)} detections written to {out}")
    return 0


def cmd_ensemble(args, argv: list[str]) -> int:
    if len(args.weights) != len(args.inputs):
        raise ValueError(
            f"{len(args.weights)} weights given for {len(args.inputs)} inputs"
        )
    out, stats = ensemble_run(args.inputs, args.weights, args.iou, args.out)
    write_run_log(Path(args.out).parent, argv, seed=None, config=None)
    print(
        f"fused {len(args.inputs)} files over {stats['images']} images "
        f"({stats['missing_image_warnings']} missing-image warnings) into {out}"
    )
    return 0


def cmd_benchmark(args, argv: list[str]) -> int:
    fps, hardware = benchmark_fps(
        args.checkpoint, args.size, n_iters=args.iters, warmup=args.warmup
    )
    line = f"fps = {fps:.2f} at {args.size}x{args.size} on {hardware}"
    log_dir = _run_dir_override("runs/benchmark")
    log = write_run_log(log_dir, argv, seed=None, config=None)
    with log.open("a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    print(line)
    return 0


# ---------------------------------------------------------------------------
# dispatch


def build_parser() -> _Parser:
    parser = _Parser(prog="duodet", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="|".join(SUBCOMMANDS))

    p = sub.add_parser("prepare-data", help="import a source tree into a manifest")
    p.add_argument("--input", required=True, help="source directory")
    p.add_argument("--format", required=True, choices=("paired", "rgb-only"))
    p.add_argument("--crop-size", type=int, default=640, help="grid crop size (rgb-only)")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("augment-preview", help="render before/after augmentation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample", type=int, required=True, help="record index")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None, help="training config for aug settings")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", required=True, help="YAML training config")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, choices=("train", "val", "test"))
    p.add_argument("--iou", type=float, default=0.5, help="match IoU threshold")
    p.add_argument("--size", type=int, default=None, help="inference input size")
    p.add_argument("--conf", type=float, default=None, help="score threshold")
    p.add_argument("--nms-iou", type=float, default=None)
    p.add_argument("--out", default="runs/eval", help="report output directory")

    p = sub.add_parser("infer", help="run inference on one rgb/tir pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--tir", required=True)
    p.add_argument("--out", required=True, help="detections output file")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--conf", type=float, default=None)
    p.add_argument("--nms-iou", type=float, default=None)
    p.add_argument("--render", default=None, help="optional overlay PNG path")

    p = sub.add_parser("ensemble", help="fuse detection files with WBF")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", type=float, required=True)
    p.add_argument("--iou", type=float, default=0.55)
    p.add_argument("--out", required=True)

    p = sub.add_parser("benchmark", help="measure inference throughput")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)

    return parser


_HANDLERS = {
    "prepare-data": cmd_prepare_data,
    "augment-preview": cmd_augment_preview,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ensemble": cmd_ensemble,
    "benchmark": cmd_benchmark,
}


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    handler = _HANDLERS[args.command]
    try:
        return handler(args, argv)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
