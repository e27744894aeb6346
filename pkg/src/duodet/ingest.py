"""Dataset ingestion: grid cropping, TIR synthesis and manifest import.

Source layout expected by the importers (the toy fixture format):

    input_dir/
      classes.json          {"num_classes": N, "class_names": [...]}
      rgb/<stem>.png        visible images (paired and rgb-only layouts)
      tir/<stem>.png        thermal images (paired layout only)
      ann/<stem>.json       [[x_min, y_min, x_max, y_max, class_id], ...]

Pairs are matched by filename stem. Adapters for third-party annotation
formats are intentionally out of scope; convert into this layout first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    BoundingBox,
    DatasetManifest,
    ManifestRecord,
    PairedSample,
    SampleMeta,
    clip_box,
    save_manifest,
    validate_sample,
)

IMAGE_EXTS = (".png", ".jpg", ".jpeg")


class IngestError(ValueError):
    """Raised when a source tree cannot be imported."""


@dataclass(frozen=True)
class CropRect:
    """Square crop window, top-left anchored, inside the source image."""

    x: int
    y: int
    size: int


def compute_crop_grid(width: int, height: int, size: int) -> list[CropRect]:
    """Place the maximum number of non-degenerate square crops over an image.

    ``nx = max(1, floor(W/S))`` and ``ny = max(1, floor(H/S))`` crops are laid
    out with origins evenly spaced so the outermost crops touch the image
    edges along any axis with more than one crop; a single crop on an axis is
    centered. When ``S`` exceeds the short side, one pseudo-crop of size
    ``min(W, H)`` at the origin is returned and is expected to be resized
    downstream. Rects are returned in row-major order.
    """
    if width <= 0 or height <= 0 or size <= 0:
        raise ValueError(
            f"width, height and size must be positive, got {width}x{height}, S={size}"
        )
    if size > min(width, height):
        return [CropRect(0, 0, min(width, height))]

    def axis_origins(extent: int, n: int) -> list[int]:
        if n == 1:
            return [round((extent - size) / 2)]
        return [round(i * (extent - size) / (n - 1)) for i in range(n)]

    nx = max(1, width // size)
    ny = max(1, height // size)
    xs = axis_origins(width, nx)
    ys = axis_origins(height, ny)
    return [CropRect(x, y, size) for y in ys for x in xs]


def crop_sample(
    s: PairedSample, r: CropRect, min_area_frac: float = 0.25
) -> PairedSample | None:
    """Crop both modalities identically and translate the boxes.

    Returns ``None`` when no box survives clipping, matching the rule that
    object-free crops are excluded from generated datasets.
    """
    h, w = s.rgb.shape[:2]
    if r.x < 0 or r.y < 0 or r.x + r.size > w or r.y + r.size > h:
        raise ValueError(f"crop {r} outside image bounds {w}x{h}")
    boxes = []
    for b in s.boxes:
        shifted = BoundingBox(
            x_min=b.x_min - r.x,
            y_min=b.y_min - r.y,
            x_max=b.x_max - r.x,
            y_max=b.y_max - r.y,
            class_id=b.class_id,
            score=b.score,
        )
        kept = clip_box(shifted, r.size, r.size, min_area_frac)
        if kept is not None:
            boxes.append(kept)
    if not boxes:
        return None
    return PairedSample(
        rgb=s.rgb[r.y : r.y + r.size, r.x : r.x + r.size].copy(),
        tir=s.tir[r.y : r.y + r.size, r.x : r.x + r.size].copy(),
        boxes=boxes,
        meta=s.meta,
    )


def synthesize_tir(rgb: np.ndarray) -> np.ndarray:
    """Stand-in thermal channel: BT.601 grayscale of the RGB image.

    Deterministic per pixel: ``round(0.299 R + 0.587 G + 0.114 B)`` clamped
    to [0, 255], returned as ``H x W x 1`` uint8.
    """
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 RGB image, got shape {rgb.shape}")
    # summed left to right so rounding matches the written formula exactly
    f = rgb.astype(np.float64)
    luma = 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)[..., None]


# ---------------------------------------------------------------------------
# directory importers


def _read_classes(src: Path) -> tuple[int, list[str]]:
    classes_file = src / "classes.json"
    if not classes_file.is_file():
        raise IngestError(f"missing {classes_file}")
    obj = json.loads(classes_file.read_text(encoding="utf-8"))
    num_classes = int(obj["num_classes"])
    class_names = [str(c) for c in obj["class_names"]]
    if num_classes <= 0 or len(class_names) != num_classes:
        raise IngestError(f"{classes_file}: inconsistent class vocabulary")
    return num_classes, class_names


def _image_stems(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    out: dict[str, Path] = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in IMAGE_EXTS:
            out[p.stem] = p
    return out


def _read_boxes(ann_path: Path, num_classes: int) -> list[BoundingBox]:
    rows = json.loads(ann_path.read_text(encoding="utf-8"))
    boxes = []
    for k, row in enumerate(rows):
        b = BoundingBox(
            x_min=float(row[0]),
            y_min=float(row[1]),
            x_max=float(row[2]),
            y_max=float(row[3]),
            class_id=int(row[4]),
        )
        bad = b.violations()
        if bad:
            raise IngestError(f"{ann_path} box {k}: {bad[0]}")
        if b.class_id >= num_classes:
            raise IngestError(
                f"{ann_path} box {k}: class_id {b.class_id} references a missing "
                f"class (num_classes={num_classes})"
            )
        boxes.append(b)
    return boxes


def _load_rgb(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def _load_tir(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)[..., None]


def import_paired(
    input_dir: str | Path, split: str = "train", source: str = "paired"
) -> DatasetManifest:
    """Import a parallel rgb/tir tree into a manifest, matching by stem."""
    src = Path(input_dir)
    num_classes, class_names = _read_classes(src)
    rgb_stems = _image_stems(src / "rgb")
    tir_stems = _image_stems(src / "tir")
    if not rgb_stems and not tir_stems:
        raise IngestError(f"no pairs found under {src}")
    unmatched = sorted(set(rgb_stems) ^ set(tir_stems))
    if unmatched:
        raise IngestError(f"unmatched rgb/tir stems: {unmatched}")

    records = []
    for stem in sorted(rgb_stems):
        ann_path = src / "ann" / f"{stem}.json"
        if not ann_path.is_file():
            raise IngestError(f"missing annotation file {ann_path}")
        boxes = _read_boxes(ann_path, num_classes)
        sample = PairedSample(
            rgb=_load_rgb(rgb_stems[stem]),
            tir=_load_tir(tir_stems[stem]),
            boxes=boxes,
            meta=SampleMeta(source=source, split=split, rgb_id=stem, tir_id=stem),
        )
        bad = validate_sample(sample)
        if bad:
            raise IngestError(f"{rgb_stems[stem]}: {bad[0]}")
        records.append(
            ManifestRecord(
                rgb_path=str(rgb_stems[stem]),
                tir_path=str(tir_stems[stem]),
                boxes=tuple(boxes),
                split=split,
                source=source,
            )
        )
    return DatasetManifest(
        records=records, num_classes=num_classes, class_names=class_names
    )


def import_rgb_only(
    input_dir: str | Path,
    out_dir: str | Path,
    crop_size: int = 640,
    split: str = "train",
    min_area_frac: float = 0.25,
) -> DatasetManifest:
    """Build a paired dataset from RGB-only sources.

    Each image is grid-cropped (:func:`compute_crop_grid`), crops without any
    surviving object are discarded, and the missing thermal channel is
    synthesized as grayscale. Crop images are written under
    ``out_dir/images``; the manifest references them relative to ``out_dir``
    and tags every record ``synthetic-tir``.
    """
    src = Path(input_dir)
    out = Path(out_dir)
    num_classes, class_names = _read_classes(src)
    rgb_stems = _image_stems(src / "rgb")
    if not rgb_stems:
        raise IngestError(f"no rgb images found under {src / 'rgb'}")

    (out / "images" / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "images" / "tir").mkdir(parents=True, exist_ok=True)

    records = []
    for stem in sorted(rgb_stems):
        ann_path = src / "ann" / f"{stem}.json"
        if not ann_path.is_file():
            raise IngestError(f"missing annotation file {ann_path}")
        boxes = _read_boxes(ann_path, num_classes)
        rgb = _load_rgb(rgb_stems[stem])
        h, w = rgb.shape[:2]
        sample = PairedSample(
            rgb=rgb,
            tir=synthesize_tir(rgb),
            boxes=boxes,
            meta=SampleMeta(source="synthetic-tir", split=split, rgb_id=stem),
        )
        for k, rect in enumerate(compute_crop_grid(w, h, crop_size)):
            crop = crop_sample(sample, rect, min_area_frac)
            if crop is None:
                continue
            # luma is pointwise, so cropping the synthesized channel equals
            # synthesizing from the crop bit-for-bit
            rel_rgb = f"images/rgb/{stem}_c{k:02d}.png"
            rel_tir = f"images/tir/{stem}_c{k:02d}.png"
            Image.fromarray(crop.rgb).save(out / rel_rgb)
            Image.fromarray(crop.tir[..., 0]).save(out / rel_tir)
            records.append(
                ManifestRecord(
                    rgb_path=rel_rgb,
                    tir_path=rel_tir,
                    boxes=tuple(crop.boxes),
                    split=split,
                    source="synthetic-tir",
                )
            )
    manifest = DatasetManifest(
        records=records, num_classes=num_classes, class_names=class_names
    )
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest
