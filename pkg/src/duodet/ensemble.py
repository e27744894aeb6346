"""Weighted box fusion of detection files from independently trained models.

Boxes of one class are greedily clustered across models: a box joins the
existing cluster whose current fused box overlaps it at or above the IoU
threshold, except that a cluster never takes two boxes from the same model.
A cluster's fused coordinates are the weight-times-score weighted average of
its members; its score is the weight-weighted mean member score discounted
by the fraction of models that contributed, so boxes seen by a single model
out of many lose confidence.

Diversity between the ensembled models is a workflow concern (different
seeds, augmentation settings or data mixes), not something this operator
enforces.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .core import BoundingBox, Detection, iou, load_detections, save_detections


@dataclass
class _Cluster:
    models: list[int]
    boxes: list[BoundingBox]
    weights: list[float]
    fused: BoundingBox


def _fuse_coords(boxes: list[BoundingBox], weights: list[float]) -> BoundingBox:
    if len(boxes) == 1:
        return boxes[0]
    wsum = 0.0
    acc = [0.0, 0.0, 0.0, 0.0]
    for b, w in zip(boxes, weights):
        ws = w * (b.score or 0.0)
        acc[0] += ws * b.x_min
        acc[1] += ws * b.y_min
        acc[2] += ws * b.x_max
        acc[3] += ws * b.y_max
        wsum += ws
    return BoundingBox(
        x_min=acc[0] / wsum,
        y_min=acc[1] / wsum,
        x_max=acc[2] / wsum,
        y_max=acc[3] / wsum,
        class_id=boxes[0].class_id,
        score=boxes[0].score,
    )


def wbf(
    det_sets: Sequence[Sequence[BoundingBox]],
    weights: Sequence[float],
    iou_thresh: float = 0.55,
) -> list[BoundingBox]:
    """Fuse per-model detection lists for one image into one list.

    All boxes must share the image's coordinate frame. Scaling every weight
    by the same positive constant leaves the result unchanged; a single
    model passes through unmodified.
    """
    if len(weights) != len(det_sets):
        raise ValueError(
            f"{len(weights)} weights for {len(det_sets)} detection sets"
        )
    if any(w <= 0 for w in weights):
        raise ValueError(f"weights must be positive, got {list(weights)}")
    n_models = len(det_sets)

    items = [
        (m, b)
        for m, dets in enumerate(det_sets)
        for b in dets
    ]
    items.sort(key=lambda t: (-(t[1].score or 0.0), t[0]))

    clusters_by_class: dict[int, list[_Cluster]] = defaultdict(list)
    for m, box in items:
        clusters = clusters_by_class[box.class_id]
        best, best_iou = None, 0.0
        for cl in clusters:
            if m in cl.models:
                continue
            v = iou(box, cl.fused)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = cl, v
        if best is None:
            clusters.append(
                _Cluster(models=[m], boxes=[box], weights=[weights[m]], fused=box)
            )
        else:
            best.models.append(m)
            best.boxes.append(box)
            best.weights.append(weights[m])
            best.fused = _fuse_coords(best.boxes, best.weights)

    out = []
    for clusters in clusters_by_class.values():
        for cl in clusters:
            if len(cl.boxes) == 1:
                mean_score = cl.boxes[0].score or 0.0
            else:
                wsum = sum(cl.weights)
                mean_score = (
                    sum(w * (b.score or 0.0) for b, w in zip(cl.boxes, cl.weights))
                    / wsum
                )
            score = mean_score * (len(cl.models) / n_models)
            f = cl.fused
            out.append(
                BoundingBox(f.x_min, f.y_min, f.x_max, f.y_max, f.class_id, score)
            )
    out.sort(
        key=lambda b: (-(b.score or 0.0), b.x_min, b.y_min, b.x_max, b.y_max, b.class_id)
    )
    return out


def ensemble_run(
    det_files: Sequence[str | Path],
    weights: Sequence[float],
    iou_thresh: float,
    out_path: str | Path,
) -> tuple[Path, dict[str, int]]:
    """Fuse several detection files image by image into one output file.

    Every image id present in any input appears in the output. Images
    missing from some inputs are fused with the absent models simply not
    contributing (their absence still counts against the score discount);
    each such gap is tallied as a warning.
    """
    if len(weights) != len(det_files):
        raise ValueError(f"{len(weights)} weights for {len(det_files)} files")
    per_model: list[dict[str, list[BoundingBox]]] = []
    for f in det_files:
        grouped: dict[str, list[BoundingBox]] = defaultdict(list)
        for det in load_detections(f):
            grouped[det.image_id].append(det.box)
        per_model.append(grouped)

    image_ids = sorted({img for g in per_model for img in g})
    warnings = 0
    fused: list[Detection] = []
    for img in image_ids:
        det_sets = [g.get(img, []) for g in per_model]
        warnings += sum(1 for s in det_sets if not s)
        for box in wbf(det_sets, weights, iou_thresh):
            fused.append(Detection(image_id=img, box=box))
    out = save_detections(fused, out_path)
    return out, {"images": len(image_ids), "missing_image_warnings": warnings}
