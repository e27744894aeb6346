"""Deterministic synthetic paired dataset for demos and self-checks.

Images contain colored rectangles ("vehicles") on a textured background;
the thermal channel is the grayscale image plus mild sensor noise. The
generator writes the source-tree layout that ``prepare-data`` imports
(rgb/, tir/, ann/, classes.json), so the whole pipeline can run end to end
without any external data.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import AugmentConfig
from .backbone import ModelConfig
from .ingest import import_paired, synthesize_tir
from .traineval import TrainConfig

CLASS_NAMES = ("block_a", "block_b")

# rectangle fill color ranges per class (warm vs cool)
_CLASS_COLORS = (
    ((170, 255), (20, 90), (20, 90)),
    ((20, 90), (20, 90), (170, 255)),
)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.linspace(60, 120, size, dtype=np.float64)
    img = np.tile(base[:, None], (1, size))[..., None].repeat(3, axis=2)
    img += rng.normal(0, 8, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _place_boxes(
    rng: np.random.Generator, size: int, max_boxes: int
) -> list[tuple[int, int, int, int, int]]:
    boxes: list[tuple[int, int, int, int, int]] = []
    n = int(rng.integers(1, max_boxes + 1))
    for _ in range(n):
        for _attempt in range(20):
            side_max = min(88, size - 16)
            w = int(rng.integers(28, side_max))
            h = int(rng.integers(28, side_max))
            x0 = int(rng.integers(4, size - w - 4))
            y0 = int(rng.integers(4, size - h - 4))
            overlap = any(
                max(0, min(x0 + w, bx1) - max(x0, bx0))
                * max(0, min(y0 + h, by1) - max(y0, by0))
                > 0.1 * w * h
                for bx0, by0, bx1, by1, _ in boxes
            )
            if not overlap:
                cid = int(rng.integers(0, len(CLASS_NAMES)))
                boxes.append((x0, y0, x0 + w, y0 + h, cid))
                break
    return boxes


def write_toy_source_tree(
    out_dir: str | Path,
    n_images: int = 8,
    image_size: int = 128,
    seed: int = 7,
    max_boxes: int = 3,
    tir_noise_sigma: float = 5.0,
) -> Path:
    """Generate the raw source tree consumed by ``prepare-data``."""
    out = Path(out_dir)
    for sub in ("rgb", "tir", "ann"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "classes.json").write_text(
        json.dumps(
            {"num_classes": len(CLASS_NAMES), "class_names": list(CLASS_NAMES)}
        ),
        encoding="utf-8",
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    for i in range(n_images):
        img = _background(rng, image_size)
        boxes = _place_boxes(rng, image_size, max_boxes)
        for x0, y0, x1, y1, cid in boxes:
            (rlo, rhi), (glo, ghi), (blo, bhi) = _CLASS_COLORS[cid]
            color = np.array(
                [
                    rng.integers(rlo, rhi),
                    rng.integers(glo, ghi),
                    rng.integers(blo, bhi),
                ],
                dtype=np.uint8,
            )
            img[y0:y1, x0:x1] = color
            img[y0 : y0 + 2, x0:x1] = 255
            img[y1 - 2 : y1, x0:x1] = 255
        tir = synthesize_tir(img).astype(np.float64)
        tir += rng.normal(0, tir_noise_sigma, size=tir.shape)
        tir = np.clip(np.rint(tir), 0, 255).astype(np.uint8)
        stem = f"img_{i:03d}"
        Image.fromarray(img).save(out / "rgb" / f"{stem}.png")
        Image.fromarray(tir[..., 0]).save(out / "tir" / f"{stem}.png")
        (out / "ann" / f"{stem}.json").write_text(
            json.dumps([[float(x0), float(y0), float(x1), float(y1), cid]
                        for x0, y0, x1, y1, cid in boxes]),
            encoding="utf-8",
        )
    return out


def make_toy_manifest(work_dir: str | Path, **kwargs) -> tuple[Path, Path]:
    """Generate the toy source tree and import it; returns (manifest, src)."""
    from .core import save_manifest

    work = Path(work_dir)
    src = write_toy_source_tree(work / "src", **kwargs)
    manifest = import_paired(src, split="train", source="toy-fixture")
    manifest_path = work / "manifest.jsonl"
    save_manifest(manifest, manifest_path)
    return manifest_path, src


def toy_model_config() -> ModelConfig:
    """Small model profile sized for minutes-scale CPU training."""
    return ModelConfig(
        num_classes=len(CLASS_NAMES),
        stem_channels=16,
        channels=(32, 64, 128),
        blocks_per_stage=2,
        fusion_heads=4,
        fusion_dim=None,
        aux_weights=(0.25, 0.25),
        conf_thresh=0.1,
        nms_iou=0.5,
    )


def toy_train_config(
    checkpoint_dir: str | Path,
    max_steps: int | None = None,
    seed: int = 0,
) -> TrainConfig:
    """Training profile for memorizing the bundled synthetic set.

    Augmentation is disabled: the point of the toy run is to overfit the
    fixed images, and stochastic augmentation only slows that down.
    """
    aug = AugmentConfig(
        p_rotate=0.0,
        p_shift=0.0,
        p_noise=0.0,
        p_brightness=0.0,
        p_edge=0.0,
        p_blur=0.0,
        p_mosaic=0.0,
        global_seed=seed,
    )
    return TrainConfig(
        epochs=1000,
        batch_size=8,
        learning_rate=0.02,
        momentum=0.9,
        weight_decay=0.0,
        seed=seed,
        input_size=128,
        max_steps=max_steps,
        checkpoint_dir=str(checkpoint_dir),
        aug=aug,
        model=toy_model_config(),
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="generate the bundled synthetic paired dataset"
    )
    parser.add_argument("--out", required=True, help="output source-tree directory")
    parser.add_argument("--n-images", type=int, default=8)
    parser.add_argument("--image-size", type=int, default=128)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    path = write_toy_source_tree(
        args.out, n_images=args.n_images, image_size=args.image_size, seed=args.seed
    )
    print(f"wrote toy source tree to {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
