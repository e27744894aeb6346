"""Shared domain types, box geometry and dataset/detection serialization.

Conventions used throughout the package:

* Boxes are axis-aligned, stored corner-format ``(x_min, y_min, x_max,
  y_max)`` in float pixel units. The coordinate frame is continuous with the
  origin at the image's top-left corner; integer pixel ``(row i, col j)``
  covers the unit square ``[j, j+1) x [i, i+1)``. Center format exists only
  at the detection-head boundary (see :func:`box_convert`).
* Images are uint8 numpy arrays, RGB channel order, shaped ``H x W x 3``
  (visible) and ``H x W x 1`` (thermal).
* Manifests and detection files are JSON Lines: one record per line.

All functions here are pure and stateless; they are safe to call from any
number of workers concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised when a manifest file or record violates the format contract."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with class id and optional confidence score.

    ``score`` is ``None`` for ground-truth annotations and a float in
    ``[0, 1]`` for predictions.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int
    score: float | None = None

    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def width(self) -> float:
        return self.x_max - self.x_min

    def height(self) -> float:
        return self.y_max - self.y_min

    def violations(self) -> list[str]:
        """Return invariant violations for this box (empty when valid)."""
        out = []
        if not self.x_min < self.x_max:
            out.append(f"box x_min ({self.x_min}) must be < x_max ({self.x_max})")
        if not self.y_min < self.y_max:
            out.append(f"box y_min ({self.y_min}) must be < y_max ({self.y_max})")
        if self.class_id < 0:
            out.append(f"box class_id ({self.class_id}) must be non-negative")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            out.append(f"box score ({self.score}) must lie in [0, 1]")
        return out


@dataclass(frozen=True)
class SampleMeta:
    """Provenance carried alongside a paired sample."""

    source: str = ""
    split: str = "train"
    rgb_id: str = ""
    tir_id: str = ""


@dataclass
class PairedSample:
    """Co-registered RGB and TIR images sharing one box list.

    Invariants (checked by :func:`validate_sample`): both modalities have
    identical height and width, ``H >= 32`` and ``W >= 32``, and every box
    lies inside ``[0, W] x [0, H]``.
    """

    rgb: np.ndarray
    tir: np.ndarray
    boxes: list[BoundingBox]
    meta: SampleMeta = field(default_factory=SampleMeta)

    @property
    def height(self) -> int:
        return int(self.rgb.shape[0])

    @property
    def width(self) -> int:
        return int(self.rgb.shape[1])

    def copy(self) -> "PairedSample":
        return PairedSample(
            rgb=self.rgb.copy(),
            tir=self.tir.copy(),
            boxes=list(self.boxes),
            meta=self.meta,
        )


@dataclass(frozen=True)
class ManifestRecord:
    """One dataset entry: image paths plus ground-truth boxes."""

    rgb_path: str
    tir_path: str
    boxes: tuple[BoundingBox, ...]
    split: str
    source: str


@dataclass
class DatasetManifest:
    """Ordered list of sample records plus the class vocabulary."""

    records: list[ManifestRecord]
    num_classes: int
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class Detection:
    """One scored detection tied to an image, the ensembling unit."""

    image_id: str
    box: BoundingBox


# ---------------------------------------------------------------------------
# box geometry


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two valid boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def clip_box(
    b: BoundingBox, width: float, height: float, min_area_frac: float = 0.25
) -> BoundingBox | None:
    """Intersect a box with the frame ``[0, W] x [0, H]``.

    Returns ``None`` when the clipped box is degenerate or retains less than
    ``min_area_frac`` of the original area. The default threshold keeps
    objects that stay at least a quarter visible after geometric transforms.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"frame dims must be positive, got {width}x{height}")
    if not 0.0 <= min_area_frac <= 1.0:
        raise ValueError(f"min_area_frac must be in [0, 1], got {min_area_frac}")
    x0 = max(b.x_min, 0.0)
    y0 = max(b.y_min, 0.0)
    x1 = min(b.x_max, float(width))
    y1 = min(b.y_max, float(height))
    if x1 <= x0 or y1 <= y0:
        return None
    if (x1 - x0) * (y1 - y0) < min_area_frac * b.area():
        return None
    return replace(b, x_min=x0, y_min=y0, x_max=x1, y_max=y1)


def box_convert(
    value: BoundingBox | tuple[float, float, float, float],
    mode: str,
) -> tuple[float, float, float, float] | BoundingBox:
    """Convert between corner and center box representations.

    ``mode='corner_to_center'`` takes a :class:`BoundingBox` and returns
    ``(cx, cy, w, h)``; ``mode='center_to_corner'`` takes ``(cx, cy, w, h)``
    and returns corner coordinates as a 4-tuple. The round trip is the
    identity up to floating-point representation.
    """
    if mode == "corner_to_center":
        b = value
        return (
            (b.x_min + b.x_max) / 2.0,
            (b.y_min + b.y_max) / 2.0,
            b.x_max - b.x_min,
            b.y_max - b.y_min,
        )
    if mode == "center_to_corner":
        cx, cy, w, h = value
        return (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    raise ValueError(f"unknown box_convert mode: {mode!r}")


def validate_sample(s: PairedSample) -> list[str]:
    """Return a description of every PairedSample invariant violation."""
    out: list[str] = []
    if s.rgb.ndim != 3 or s.rgb.shape[2] != 3:
        out.append(f"rgb must be HxWx3, got shape {s.rgb.shape}")
    if s.tir.ndim != 3 or s.tir.shape[2] != 1:
        out.append(f"tir must be HxWx1, got shape {s.tir.shape}")
    if s.rgb.dtype != np.uint8:
        out.append(f"rgb dtype must be uint8, got {s.rgb.dtype}")
    if s.tir.dtype != np.uint8:
        out.append(f"tir dtype must be uint8, got {s.tir.dtype}")
    if s.rgb.shape[:2] != s.tir.shape[:2]:
        out.append(
            f"rgb and tir dimensions differ: rgb {s.rgb.shape[:2]} vs tir {s.tir.shape[:2]}"
        )
        return out
    h, w = s.rgb.shape[:2]
    if h < 32 or w < 32:
        out.append(f"image dims must be at least 32x32, got {h}x{w}")
    for i, b in enumerate(s.boxes):
        out.extend(f"boxes[{i}]: {v}" for v in b.violations())
        if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
            out.append(
                f"boxes[{i}]: ({b.x_min},{b.y_min},{b.x_max},{b.y_max}) "
                f"outside frame [0,{w}]x[0,{h}]"
            )
    return out


# ---------------------------------------------------------------------------
# manifest serialization
#
# File format: JSON Lines. The first line is a header object
# {"num_classes": N, "class_names": [...]}; every following line is a record
# {"rgb_path": ..., "tir_path": ..., "boxes": [[x_min,y_min,x_max,y_max,class_id],...],
#  "split": ..., "source": ...}. Relative image paths are resolved against
# the manifest file's directory.


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "num_classes": manifest.num_classes,
            "class_names": list(manifest.class_names),
        }
        fh.write(json.dumps(header) + "\n")
        for rec in manifest.records:
            obj = {
                "rgb_path": rec.rgb_path,
                "tir_path": rec.tir_path,
                "boxes": [
                    [b.x_min, b.y_min, b.x_max, b.y_max, b.class_id]
                    for b in rec.boxes
                ],
                "split": rec.split,
                "source": rec.source,
            }
            fh.write(json.dumps(obj) + "\n")
    return path


def _parse_record(obj: dict, num_classes: int, line_no: int) -> ManifestRecord:
    required = {"rgb_path", "tir_path", "boxes", "split", "source"}
    missing = required - obj.keys()
    if missing:
        raise ManifestError(f"line {line_no}: missing fields {sorted(missing)}")
    unknown = obj.keys() - required
    if unknown:
        raise ManifestError(f"line {line_no}: unknown fields {sorted(unknown)}")
    if obj["split"] not in SPLITS:
        raise ManifestError(
            f"line {line_no}: split {obj['split']!r} not one of {SPLITS}"
        )
    boxes = []
    for k, row in enumerate(obj["boxes"]):
        if len(row) != 5:
            raise ManifestError(
                f"line {line_no}: boxes[{k}] must have 5 entries, got {len(row)}"
            )
        b = BoundingBox(
            x_min=float(row[0]),
            y_min=float(row[1]),
            x_max=float(row[2]),
            y_max=float(row[3]),
            class_id=int(row[4]),
        )
        bad = b.violations()
        if bad:
            raise ManifestError(f"line {line_no}: boxes[{k}]: {bad[0]}")
        if b.class_id >= num_classes:
            raise ManifestError(
                f"line {line_no}: boxes[{k}] class_id {b.class_id} "
                f">= num_classes {num_classes}"
            )
        boxes.append(b)
    return ManifestRecord(
        rgb_path=str(obj["rgb_path"]),
        tir_path=str(obj["tir_path"]),
        boxes=tuple(boxes),
        split=str(obj["split"]),
        source=str(obj["source"]),
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    records: list[ManifestRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"line 1: invalid JSON header: {e}") from e
    if "num_classes" not in header or "class_names" not in header:
        raise ManifestError("line 1: header must carry num_classes and class_names")
    num_classes = int(header["num_classes"])
    class_names = [str(c) for c in header["class_names"]]
    if num_classes <= 0:
        raise ManifestError(f"line 1: num_classes must be positive, got {num_classes}")
    if len(class_names) != num_classes:
        raise ManifestError(
            f"line 1: {len(class_names)} class_names for num_classes {num_classes}"
        )
    seen_paths: set[str] = set()
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"line {i}: invalid JSON: {e}") from e
        rec = _parse_record(obj, num_classes, i)
        for p in (rec.rgb_path, rec.tir_path):
            if p in seen_paths:
                raise ManifestError(f"line {i}: duplicate image path {p!r}")
            seen_paths.add(p)
        records.append(rec)
    return DatasetManifest(
        records=records, num_classes=num_classes, class_names=class_names
    )


def resolve_path(p: str, manifest_path: str | Path) -> Path:
    """Resolve a record path relative to the manifest's directory."""
    candidate = Path(p)
    if candidate.is_absolute():
        return candidate
    return Path(manifest_path).parent / candidate


def load_sample(
    record: ManifestRecord, manifest_path: str | Path
) -> PairedSample:
    """Read one record's image pair from disk into a PairedSample."""
    from PIL import Image

    rgb_path = resolve_path(record.rgb_path, manifest_path)
    tir_path = resolve_path(record.tir_path, manifest_path)
    rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.uint8)
    tir = np.asarray(Image.open(tir_path).convert("L"), dtype=np.uint8)[..., None]
    return PairedSample(
        rgb=rgb,
        tir=tir,
        boxes=list(record.boxes),
        meta=SampleMeta(
            source=record.source,
            split=record.split,
            rgb_id=Path(record.rgb_path).stem,
            tir_id=Path(record.tir_path).stem,
        ),
    )


# ---------------------------------------------------------------------------
# detections interchange format
#
# JSON Lines, one detection per line with fields exactly
# {image_id, x_min, y_min, x_max, y_max, class_id, score}. This is the file
# format produced by inference and consumed by evaluation and ensembling.

_DET_FIELDS = ("image_id", "x_min", "y_min", "x_max", "y_max", "class_id", "score")


def save_detections(dets: Iterable[Detection], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for d in dets:
            b = d.box
            fh.write(
                json.dumps(
                    {
                        "image_id": d.image_id,
                        "x_min": b.x_min,
                        "y_min": b.y_min,
                        "x_max": b.x_max,
                        "y_max": b.y_max,
                        "class_id": b.class_id,
                        "score": b.score,
                    }
                )
                + "\n"
            )
    return path


def load_detections(path: str | Path) -> list[Detection]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"detections file not found: {path}")
    out: list[Detection] = []
    with path.open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path} line {i}: invalid JSON: {e}") from e
            missing = set(_DET_FIELDS) - obj.keys()
            if missing:
                raise ManifestError(
                    f"{path} line {i}: missing fields {sorted(missing)}"
                )
            box = BoundingBox(
                x_min=float(obj["x_min"]),
                y_min=float(obj["y_min"]),
                x_max=float(obj["x_max"]),
                y_max=float(obj["y_max"]),
                class_id=int(obj["class_id"]),
                score=float(obj["score"]),
            )
            bad = box.violations()
            if bad:
                raise ManifestError(f"{path} line {i}: {bad[0]}")
            out.append(Detection(image_id=str(obj["image_id"]), box=box))
    return out


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    """Stack boxes into an (N, 5) float array [x0, y0, x1, y1, class_id]."""
    if not boxes:
        return np.zeros((0, 5), dtype=np.float64)
    return np.array(
        [[b.x_min, b.y_min, b.x_max, b.y_max, b.class_id] for b in boxes],
        dtype=np.float64,
    )
