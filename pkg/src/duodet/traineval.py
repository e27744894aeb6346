"""Training loop, NMS, mAP evaluation, inference and throughput benchmark.

Training is a single sequential SGD-with-momentum loop, deterministic per
(manifest, config, seed): sample order, augmentation draws and weight
initialization all derive from the config seed. Loss components of every
step are appended to a JSON-lines log.

Evaluation computes per-class average precision at a configurable IoU
threshold using 101-point interpolation, with detections greedily matched
to the highest-IoU unmatched ground truth. The mean is taken over classes
that have at least one ground-truth box.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np
import torch

from .augment import (
    AugmentConfig,
    RngStream,
    apply_pipeline,
    augment_config_from_dict,
    mosaic,
)
from .backbone import STRIDES, ModelConfig, model_config_from_dict
from .checkpoint import load_checkpoint, save_checkpoint
from .core import (
    BoundingBox,
    DatasetManifest,
    Detection,
    PairedSample,
    clip_box,
    iou,
    load_sample,
)
from .heads import assign_targets, decode, detection_loss, total_loss
from .model import DualDetector, images_to_input, init_params, strip_aux

# sentinel sample index for the per-epoch shuffle stream
_SHUFFLE_STREAM = -1


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; carries the failing step."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss ({value}) at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    input_size: int = 128
    max_steps: int | None = None
    checkpoint_dir: str = "runs/train"
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(num_classes=1))

    def validate(self) -> list[str]:
        out = []
        if self.epochs <= 0:
            out.append(f"epochs ({self.epochs}) must be positive")
        if self.batch_size <= 0:
            out.append(f"batch_size ({self.batch_size}) must be positive")
        if self.learning_rate <= 0:
            out.append(f"learning_rate ({self.learning_rate}) must be positive")
        if not 0.0 <= self.momentum < 1.0:
            out.append(f"momentum ({self.momentum}) must lie in [0, 1)")
        if self.weight_decay < 0:
            out.append(f"weight_decay ({self.weight_decay}) must be >= 0")
        if self.input_size % 32 != 0 or self.input_size <= 0:
            out.append(
                f"input_size ({self.input_size}) must be a positive multiple of 32"
            )
        if self.max_steps is not None and self.max_steps <= 0:
            out.append(f"max_steps ({self.max_steps}) must be positive when set")
        out.extend(self.aug.validate())
        out.extend(self.model.validate())
        return out


def train_config_from_dict(d: dict) -> TrainConfig:
    """Build a TrainConfig from a nested mapping, rejecting unknown keys."""
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(d)
    kwargs["aug"] = augment_config_from_dict(kwargs.get("aug", {}) or {})
    if "model" not in kwargs:
        raise ValueError("config must carry a 'model' section")
    kwargs["model"] = model_config_from_dict(kwargs["model"] or {})
    cfg = TrainConfig(**kwargs)
    bad = cfg.validate()
    if bad:
        raise ValueError("invalid train config: " + "; ".join(bad))
    return cfg


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps_run: int
    final_loss: float
    stopped_early: bool = False


def _resize_sample(s: PairedSample, size: int) -> PairedSample:
    h, w = s.rgb.shape[:2]
    if h == size and w == size:
        return s
    rgb = cv2.resize(s.rgb, (size, size), interpolation=cv2.INTER_LINEAR)
    tir = cv2.resize(s.tir[..., 0], (size, size), interpolation=cv2.INTER_LINEAR)
    sx, sy = size / w, size / h
    boxes = []
    for b in s.boxes:
        scaled = BoundingBox(
            b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy,
            b.class_id, b.score,
        )
        kept = clip_box(scaled, size, size, min_area_frac=0.0)
        if kept is not None:
            boxes.append(kept)
    return PairedSample(rgb=rgb, tir=tir[..., None], boxes=boxes, meta=s.meta)


def _grid_sizes(size: int) -> list[tuple[int, int]]:
    return [(size // s, size // s) for s in STRIDES]


def _augmented_sample(
    pool: list[PairedSample], idx: int, cfg: TrainConfig, epoch: int
) -> PairedSample:
    """Draw one (possibly mosaicked) augmented training sample."""
    rng = RngStream(cfg.seed, epoch, idx)
    s = pool[idx]
    if rng.bernoulli(cfg.aug.p_mosaic):
        partners = [pool[rng.choice(len(pool))] for _ in range(3)]
        s = mosaic([s, *partners], cfg.input_size, rng, cfg.aug.min_area_frac)
    return apply_pipeline(s, cfg.aug, rng)


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    manifest_path: str | Path,
    step_hook: Callable[[int, DualDetector], bool] | None = None,
) -> TrainResult:
    """Run the full training loop and write per-epoch checkpoints.

    ``step_hook(step, model)`` runs after every optimizer step; returning
    True stops training early (used e.g. for eval-until-target loops).
    A checkpoint is written after every epoch; only the most recent three
    epoch files are retained (plus the final ``checkpoint.dckpt``).
    """
    bad = cfg.validate()
    if bad:
        raise ValueError("invalid train config: " + "; ".join(bad))
    records = [r for r in manifest.records if r.split == "train"]
    if not records:
        raise ValueError("manifest has no train-split records")
    pool = [load_sample(r, manifest_path) for r in records]

    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = ckpt_dir / "train_log.jsonl"

    torch.manual_seed(cfg.seed)
    model = init_params(cfg.model, cfg.seed)
    model.train()
    opt = torch.optim.SGD(
        model.parameters(),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    lam_pre, lam_post = cfg.model.aux_weights
    use_aux = lam_pre > 0 or lam_post > 0
    grid_sizes = _grid_sizes(cfg.input_size)

    step = 0
    stopped = False
    final_total = float("nan")
    ckpt_path = ckpt_dir / "checkpoint.dckpt"
    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            shuffle = RngStream(cfg.seed, epoch, _SHUFFLE_STREAM)
            order = list(range(len(pool)))
            for i in range(len(order) - 1, 0, -1):
                j = shuffle.choice(i + 1)
                order[i], order[j] = order[j], order[i]
            for start in range(0, len(order), cfg.batch_size):
                batch_idx = order[start : start + cfg.batch_size]
                samples = [
                    _resize_sample(
                        _augmented_sample(pool, i, cfg, epoch), cfg.input_size
                    )
                    for i in batch_idx
                ]
                rgb = np.stack([s.rgb for s in samples])
                tir = np.stack([s.tir for s in samples])
                rgb_t, tir_t = images_to_input(rgb, tir)
                targets = [
                    assign_targets(s.boxes, grid_sizes, cfg.model.num_classes)
                    for s in samples
                ]

                outputs = model(rgb_t, tir_t) if use_aux else {
                    "main": model.forward_main(rgb_t, tir_t)
                }
                main_l, _ = detection_loss(outputs["main"], targets)
                if use_aux:
                    aux = {
                        name: detection_loss(outputs[name], targets)[0]
                        for name in ("pre_rgb", "pre_tir", "post")
                    }
                    loss = total_loss(main_l, aux, cfg.model.aux_weights)
                else:
                    aux = {k: torch.zeros(()) for k in ("pre_rgb", "pre_tir", "post")}
                    loss = main_l

                value = float(loss.item())
                if not np.isfinite(value):
                    raise TrainingDivergedError(step, value)
                opt.zero_grad()
                loss.backward()
                opt.step()

                log.write(
                    json.dumps(
                        {
                            "step": step,
                            "L_main": float(main_l.item()),
                            "L_pre_rgb": float(aux["pre_rgb"].item()),
                            "L_pre_tir": float(aux["pre_tir"].item()),
                            "L_post": float(aux["post"].item()),
                            "total": value,
                        }
                    )
                    + "\n"
                )
                final_total = value
                step += 1
                if step_hook is not None and step_hook(step, model):
                    stopped = True
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    stopped = True
                if stopped:
                    break
            save_checkpoint(model, ckpt_dir / f"ckpt_epoch_{epoch:04d}.dckpt")
            stale = sorted(ckpt_dir.glob("ckpt_epoch_*.dckpt"))[:-3]
            for old in stale:
                old.unlink()
            if stopped:
                break
    save_checkpoint(model, ckpt_path)
    return TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        steps_run=step,
        final_loss=final_total,
        stopped_early=stopped,
    )


# ---------------------------------------------------------------------------
# non-maximum suppression


def nms(dets: Sequence[BoundingBox], iou_thresh: float) -> list[BoundingBox]:
    """Greedy per-class suppression, descending score, ties by lower index.

    A candidate is suppressed when its IoU with an already kept box of the
    same class reaches ``iou_thresh``.
    """
    order = sorted(
        range(len(dets)), key=lambda k: (-(dets[k].score or 0.0), k)
    )
    kept: list[BoundingBox] = []
    for k in order:
        cand = dets[k]
        if any(
            kb.class_id == cand.class_id and iou(kb, cand) >= iou_thresh
            for kb in kept
        ):
            continue
        kept.append(cand)
    return kept


# ---------------------------------------------------------------------------
# mAP evaluation

_RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalReport:
    """Per-class AP at one IoU threshold plus match counts and PR curves."""

    iou_thresh: float
    per_class_ap: dict[int, float]
    map_value: float
    counts: dict[int, tuple[int, int, int]]  # class -> (tp, fp, fn)
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]]  # class -> (recall, precision)
    wall_clock: float


def _det_sort_key(item: tuple[str, BoundingBox]):
    image_id, b = item
    return (-(b.score or 0.0), image_id, b.x_min, b.y_min, b.x_max, b.y_max)


def evaluate_map(
    preds: dict[str, list[BoundingBox]],
    gts: dict[str, list[BoundingBox]],
    num_classes: int,
    iou_thresh: float = 0.5,
) -> EvalReport:
    """Compute 101-point interpolated AP per class and their mean.

    Detections are processed in a canonical order (score descending, then
    image id and coordinates), so the result is invariant to image and
    prediction ordering. Classes without ground truth are excluded from the
    mean; an empty ground-truth set yields mAP 0.
    """
    t0 = time.perf_counter()
    for name, coll in (("prediction", preds), ("ground-truth", gts)):
        for image_id, boxes in coll.items():
            for b in boxes:
                if not 0 <= b.class_id < num_classes:
                    raise ValueError(
                        f"{name} box in image {image_id!r} has class_id "
                        f"{b.class_id} outside [0, {num_classes})"
                    )

    per_class_ap: dict[int, float] = {}
    counts: dict[int, tuple[int, int, int]] = {}
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    image_ids = set(preds) | set(gts)

    for c in range(num_classes):
        gt_c = {img: [b for b in gts.get(img, []) if b.class_id == c]
                for img in image_ids}
        n_gt = sum(len(v) for v in gt_c.values())
        dets = [
            (img, b)
            for img in image_ids
            for b in preds.get(img, [])
            if b.class_id == c
        ]
        dets.sort(key=_det_sort_key)

        matched: dict[str, set[int]] = {img: set() for img in image_ids}
        tp_flags = np.zeros(len(dets), dtype=bool)
        for d_idx, (img, det) in enumerate(dets):
            best_iou, best_gt = 0.0, -1
            for g_idx, g in enumerate(gt_c[img]):
                if g_idx in matched[img]:
                    continue
                v = iou(det, g)
                if v > best_iou:
                    best_iou, best_gt = v, g_idx
            if best_gt >= 0 and best_iou >= iou_thresh:
                tp_flags[d_idx] = True
                matched[img].add(best_gt)

        tp_cum = np.cumsum(tp_flags)
        fp_cum = np.cumsum(~tp_flags)
        n_det = len(dets)
        tp_total = int(tp_cum[-1]) if n_det else 0
        counts[c] = (tp_total, n_det - tp_total, n_gt - tp_total)
        if n_gt == 0:
            continue
        if n_det == 0:
            per_class_ap[c] = 0.0
            pr_curves[c] = (np.zeros(0), np.zeros(0))
            continue
        recall = tp_cum / n_gt
        precision = tp_cum / (tp_cum + fp_cum)
        interp = np.zeros_like(_RECALL_POINTS)
        for k, r in enumerate(_RECALL_POINTS):
            valid = precision[recall >= r]
            interp[k] = valid.max() if valid.size else 0.0
        per_class_ap[c] = float(interp.mean())
        pr_curves[c] = (recall, precision)

    map_value = (
        float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    )
    return EvalReport(
        iou_thresh=iou_thresh,
        per_class_ap=per_class_ap,
        map_value=map_value,
        counts=counts,
        pr_curves=pr_curves,
        wall_clock=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# inference


def _round_up_32(n: int) -> int:
    return ((n + 31) // 32) * 32


def infer_sample(
    model: DualDetector,
    sample: PairedSample,
    input_size: int | None = None,
    conf_thresh: float | None = None,
    nms_iou: float | None = None,
) -> list[BoundingBox]:
    """Deterministic single-sample inference: forward, decode, per-class NMS.

    The sample is stretched to ``input_size`` (default: its own dimensions
    rounded up to multiples of 32) and predictions are mapped back to the
    original frame.
    """
    conf = model.cfg.conf_thresh if conf_thresh is None else conf_thresh
    nms_t = model.cfg.nms_iou if nms_iou is None else nms_iou
    h, w = sample.rgb.shape[:2]
    size = input_size if input_size is not None else _round_up_32(max(h, w))
    resized = _resize_sample(sample, size)
    rgb_t, tir_t = images_to_input(resized.rgb[None], resized.tir[None])
    model.eval()
    with torch.no_grad():
        raw = model.forward_main(rgb_t, tir_t)
    boxes = decode(raw, conf)[0]
    boxes = nms(boxes, nms_t)
    sx, sy = w / size, h / size
    out = []
    for b in boxes:
        scaled = BoundingBox(
            b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy,
            b.class_id, b.score,
        )
        kept = clip_box(scaled, w, h, min_area_frac=0.0)
        if kept is not None:
            out.append(kept)
    return out


def infer(
    checkpoint_path: str | Path,
    sample: PairedSample,
    input_size: int | None = None,
    conf_thresh: float | None = None,
    nms_iou: float | None = None,
) -> list[BoundingBox]:
    """Load a checkpoint, strip auxiliary heads and run one sample."""
    model, _ = load_checkpoint(checkpoint_path)
    if model.with_aux:
        model = strip_aux(model)
    return infer_sample(model, sample, input_size, conf_thresh, nms_iou)


def evaluate_checkpoint(
    checkpoint_path: str | Path,
    manifest: DatasetManifest,
    manifest_path: str | Path,
    split: str | None = None,
    input_size: int | None = None,
    iou_thresh: float = 0.5,
    conf_thresh: float | None = None,
    nms_iou: float | None = None,
) -> tuple[EvalReport, list[Detection]]:
    """Run inference over a manifest and score it against its own boxes.

    Image ids in the returned detections are manifest record indices.
    """
    model, _ = load_checkpoint(checkpoint_path)
    if model.with_aux:
        model = strip_aux(model)
    preds: dict[str, list[BoundingBox]] = {}
    gts: dict[str, list[BoundingBox]] = {}
    detections: list[Detection] = []
    for idx, rec in enumerate(manifest.records):
        if split is not None and rec.split != split:
            continue
        image_id = str(idx)
        sample = load_sample(rec, manifest_path)
        boxes = infer_sample(model, sample, input_size, conf_thresh, nms_iou)
        preds[image_id] = boxes
        gts[image_id] = list(rec.boxes)
        detections.extend(Detection(image_id=image_id, box=b) for b in boxes)
    if not gts:
        raise ValueError(
            f"no records selected from manifest (split={split!r})"
        )
    report = evaluate_map(preds, gts, manifest.num_classes, iou_thresh)
    return report, detections


# ---------------------------------------------------------------------------
# throughput benchmark


def benchmark_fps(
    checkpoint_path: str | Path,
    input_size: int,
    n_iters: int = 20,
    warmup: int = 3,
) -> tuple[float, str]:
    """Median single-image inference throughput in frames per second."""
    if n_iters < 3:
        raise ValueError(f"n_iters must be >= 3, got {n_iters}")
    if input_size % 32 != 0 or input_size <= 0:
        raise ValueError(f"input_size must be a positive multiple of 32")
    model, _ = load_checkpoint(checkpoint_path)
    if model.with_aux:
        model = strip_aux(model)
    model.eval()
    gen = torch.Generator().manual_seed(0)
    rgb = torch.rand((1, 3, input_size, input_size), generator=gen)
    tir = torch.rand((1, 3, input_size, input_size), generator=gen)
    times = []
    with torch.no_grad():
        for _ in range(warmup):
            model.forward_main(rgb, tir)
        for _ in range(n_iters):
            t0 = time.perf_counter()
            model.forward_main(rgb, tir)
            times.append(time.perf_counter() - t0)
    median = float(np.median(times))
    hardware = f"{platform.platform()} / {platform.machine()} / {torch.get_num_threads()} torch threads"
    return 1.0 / median, hardware
