"""Seeded, modality-aware augmentation for paired RGB/TIR samples.

The pipeline applies photometric operations first (they never touch boxes)
and at most one geometric operation last. A geometric op may target both
modalities, in which case boxes follow the image content, or exactly one of
them, which simulates RGB/TIR misregistration: the untouched modality and
the box list stay bit-identical, so labels remain aligned with at least one
modality.

Every stochastic decision is drawn from an :class:`RngStream` derived from
``(global_seed, epoch, sample_index)``, making the whole pipeline a pure
function of (sample, config, seed, epoch, index). Draw order within one
pipeline invocation, in full:

1. noise trigger for rgb; if hit: sigma, then one normal field
2. noise trigger for tir; if hit: sigma, then one normal field
3. brightness trigger (rgb only); if hit: factor
4. edge-enhance trigger (tir only); if hit: strength
5. blur trigger (tir only); if hit: sigma
6. rotate trigger, then shift trigger (rotation wins when both fire)
7. when a geometric op fires: one-sided trigger, then a side coin when
   one-sided, then the op's magnitude draws

Mosaic is a batch-level operation: the training loop draws its trigger and
partner samples before calling :func:`apply_pipeline`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields
from math import ceil, cos, radians, sin
from typing import Sequence

import cv2
import numpy as np

from .core import BoundingBox, PairedSample, clip_box

ROTATE = "rotate"
SHIFT = "shift"
TARGET_BOTH = "both"
TARGET_RGB = "rgb_only"
TARGET_TIR = "tir_only"

# blur/rotation magnitudes below these act as identity
_MIN_BLUR_SIGMA = 0.1


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation probabilities and magnitude ranges.

    Magnitudes whose real-world values are not pinned down anywhere
    (noise sigma, brightness factor, edge strength, blur sigma) are declared
    here as ranges and drawn uniformly when the op triggers.
    """

    p_rotate: float = 0.3
    rotate_range: tuple[float, float] = (-5.0, 5.0)
    p_shift: float = 0.3
    shift_range: tuple[int, int] = (-10, 10)
    p_noise: float = 0.3
    noise_sigma: float = 10.0
    p_brightness: float = 0.3
    brightness_range: tuple[float, float] = (0.6, 1.4)
    p_edge: float = 0.3
    edge_strength: tuple[float, float] = (0.5, 1.5)
    p_blur: float = 0.3
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    p_mosaic: float = 0.0
    p_one_sided: float = 0.5
    min_area_frac: float = 0.25
    global_seed: int = 0

    def validate(self) -> list[str]:
        out = []
        for name in (
            "p_rotate",
            "p_shift",
            "p_noise",
            "p_brightness",
            "p_edge",
            "p_blur",
            "p_mosaic",
            "p_one_sided",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"{name} ({v}) must lie in [0, 1]")
        lo, hi = self.rotate_range
        if not (-180.0 <= lo <= hi <= 180.0):
            out.append(f"rotate_range {self.rotate_range} must be within [-180, 180]")
        if self.shift_range[0] > self.shift_range[1]:
            out.append(f"shift_range {self.shift_range} must be non-empty")
        if self.noise_sigma < 0:
            out.append(f"noise_sigma ({self.noise_sigma}) must be >= 0")
        if self.brightness_range[0] > self.brightness_range[1] or self.brightness_range[0] < 0:
            out.append(f"brightness_range {self.brightness_range} invalid")
        if self.edge_strength[0] > self.edge_strength[1] or self.edge_strength[0] < 0:
            out.append(f"edge_strength {self.edge_strength} invalid")
        if self.blur_sigma_range[0] > self.blur_sigma_range[1] or self.blur_sigma_range[0] < 0:
            out.append(f"blur_sigma_range {self.blur_sigma_range} invalid")
        if not 0.0 <= self.min_area_frac <= 1.0:
            out.append(f"min_area_frac ({self.min_area_frac}) must lie in [0, 1]")
        return out


def stable_hash(*parts: int) -> int:
    """Platform-independent 64-bit hash of a tuple of integers."""
    payload = b"".join(struct.pack("<q", int(p)) for p in parts)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


class RngStream:
    """Deterministic random stream keyed by (global_seed, epoch, sample_index).

    The same key always yields an identical draw sequence, independent of
    platform and process.
    """

    def __init__(self, global_seed: int, epoch: int = 0, sample_index: int = 0):
        self.derived_seed = stable_hash(global_seed, epoch, sample_index)
        self._gen = np.random.Generator(np.random.PCG64(self.derived_seed))

    def uniform(self, lo: float, hi: float) -> float:
        return float(self._gen.uniform(lo, hi))

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed interval [lo, hi]."""
        return int(self._gen.integers(lo, hi + 1))

    def bernoulli(self, p: float) -> bool:
        return bool(self._gen.random() < p)

    def normal_field(self, shape: tuple[int, ...], sigma: float) -> np.ndarray:
        return self._gen.normal(0.0, sigma, size=shape)

    def choice(self, n: int) -> int:
        return int(self._gen.integers(0, n))


@dataclass
class AugmentTrace:
    """Which ops a pipeline invocation actually applied (for tests/previews)."""

    noise_rgb: bool = False
    noise_tir: bool = False
    brightness: bool = False
    edge: bool = False
    blur: bool = False
    geometric: str | None = None
    target: str | None = None
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# pixel-level ops (never touch boxes)


def add_noise(img: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """Additive Gaussian pixel noise, clamped to [0, 255]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    noisy = img.astype(np.float64) + rng.normal_field(img.shape, sigma)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    """Multiplicative brightness change, clamped to [0, 255]."""
    if factor < 0:
        raise ValueError(f"factor must be >= 0, got {factor}")
    return np.clip(np.rint(img.astype(np.float64) * factor), 0, 255).astype(np.uint8)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), edge-replicate padding.

    Sigmas below 0.1 act as identity.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma < _MIN_BLUR_SIGMA:
        return img.copy()
    blurred = _blur_float(img.astype(np.float32), sigma)
    return np.clip(np.rint(blurred), 0, 255).astype(np.uint8)


def _blur_float(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = ceil(3 * sigma)
    ksize = 2 * radius + 1
    squeeze = img.ndim == 3 and img.shape[2] == 1
    src = img[..., 0] if squeeze else img
    out = cv2.GaussianBlur(
        src, (ksize, ksize), sigmaX=sigma, sigmaY=sigma,
        borderType=cv2.BORDER_REPLICATE,
    )
    return out[..., None] if squeeze else out


def edge_enhance(img: np.ndarray, strength: float) -> np.ndarray:
    """Unsharp mask: ``img + strength * (img - blur(img, sigma=1))``."""
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    if strength == 0:
        return img.copy()
    f = img.astype(np.float32)
    sharp = f + strength * (f - _blur_float(f, 1.0))
    return np.clip(np.rint(sharp), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# geometric ops


def _channel_mean_fill(img: np.ndarray) -> tuple[float, ...]:
    return tuple(float(img[..., c].mean()) for c in range(img.shape[2]))


def _warp(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    squeeze = img.shape[2] == 1
    src = img[..., 0] if squeeze else img
    fill = _channel_mean_fill(img)
    out = cv2.warpAffine(
        src,
        matrix,
        (w, h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=fill if not squeeze else fill[0],
    )
    return out[..., None] if squeeze else out


def _rotation_matrix(w: int, h: int, angle_deg: float) -> np.ndarray:
    # cv2 convention: pixel centers at integer coordinates, so the continuous
    # frame center (W/2, H/2) is ((W-1)/2, (H-1)/2) in cv2 coordinates
    return cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle_deg, 1.0)


def _rotate_box_hull(
    b: BoundingBox, angle_deg: float, w: int, h: int
) -> BoundingBox:
    """Axis-aligned hull of the box corners under the image's rotation."""
    theta = radians(angle_deg)
    c, s = cos(theta), sin(theta)
    cx, cy = w / 2.0, h / 2.0
    corners = np.array(
        [
            [b.x_min, b.y_min],
            [b.x_max, b.y_min],
            [b.x_min, b.y_max],
            [b.x_max, b.y_max],
        ]
    )
    dx = corners[:, 0] - cx
    dy = corners[:, 1] - cy
    # same source-to-destination map as the image warp: [[c, s], [-s, c]]
    rx = c * dx + s * dy + cx
    ry = -s * dx + c * dy + cy
    return BoundingBox(
        x_min=float(rx.min()),
        y_min=float(ry.min()),
        x_max=float(rx.max()),
        y_max=float(ry.max()),
        class_id=b.class_id,
        score=b.score,
    )


def rotate_sample(
    s: PairedSample,
    angle_deg: float,
    target: str = TARGET_BOTH,
    min_area_frac: float = 0.25,
) -> PairedSample:
    """Rotate about the image center with bilinear resampling.

    Canvas size is unchanged; exposed regions are filled with the channel
    mean. With ``target="both"`` each box becomes the axis-aligned hull of
    its rotated corners, clipped to the frame; a one-sided target rotates
    only that image and leaves boxes untouched.
    """
    _check_target(target)
    if angle_deg == 0.0:
        return s.copy()
    h, w = s.rgb.shape[:2]
    m = _rotation_matrix(w, h, angle_deg)
    rgb = _warp(s.rgb, m) if target in (TARGET_BOTH, TARGET_RGB) else s.rgb.copy()
    tir = _warp(s.tir, m) if target in (TARGET_BOTH, TARGET_TIR) else s.tir.copy()
    if target == TARGET_BOTH:
        boxes = []
        for b in s.boxes:
            hull = _rotate_box_hull(b, angle_deg, w, h)
            kept = clip_box(hull, w, h, min_area_frac)
            if kept is not None:
                boxes.append(kept)
    else:
        boxes = list(s.boxes)
    return PairedSample(rgb=rgb, tir=tir, boxes=boxes, meta=s.meta)


def shift_sample(
    s: PairedSample,
    dx: int,
    dy: int,
    target: str = TARGET_BOTH,
    min_area_frac: float = 0.25,
) -> PairedSample:
    """Translate image content by (dx, dy) pixels, filling exposed regions.

    With ``target="both"`` boxes are translated and clipped; a one-sided
    target moves only that image and leaves boxes untouched.
    """
    _check_target(target)
    if dx == 0 and dy == 0:
        return s.copy()
    h, w = s.rgb.shape[:2]
    m = np.array([[1.0, 0.0, float(dx)], [0.0, 1.0, float(dy)]], dtype=np.float64)
    rgb = _warp(s.rgb, m) if target in (TARGET_BOTH, TARGET_RGB) else s.rgb.copy()
    tir = _warp(s.tir, m) if target in (TARGET_BOTH, TARGET_TIR) else s.tir.copy()
    if target == TARGET_BOTH:
        boxes = []
        for b in s.boxes:
            moved = BoundingBox(
                b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy,
                b.class_id, b.score,
            )
            kept = clip_box(moved, w, h, min_area_frac)
            if kept is not None:
                boxes.append(kept)
    else:
        boxes = list(s.boxes)
    return PairedSample(rgb=rgb, tir=tir, boxes=boxes, meta=s.meta)


def _check_target(target: str) -> None:
    if target not in (TARGET_BOTH, TARGET_RGB, TARGET_TIR):
        raise ValueError(f"unknown target {target!r}")


# ---------------------------------------------------------------------------
# mosaic


def mosaic(
    samples: Sequence[PairedSample],
    out_size: int,
    rng: RngStream,
    min_area_frac: float = 0.25,
) -> PairedSample:
    """Composite four samples into one canvas split at a random joint point.

    The joint is drawn uniformly (integer coordinates) from the central half
    of the canvas. Each sample is scaled preserving aspect ratio to cover its
    quadrant and the overflow is cropped, so boxes crossing a quadrant's
    far edge are clipped and dropped below ``min_area_frac``.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    if out_size < 64:
        raise ValueError(f"out_size must be >= 64, got {out_size}")
    lo, hi = out_size // 4, 3 * out_size // 4
    jx = rng.integer(lo, hi)
    jy = rng.integer(lo, hi)
    return mosaic_at(samples, out_size, (jx, jy), min_area_frac)


def mosaic_at(
    samples: Sequence[PairedSample],
    out_size: int,
    joint: tuple[int, int],
    min_area_frac: float = 0.25,
) -> PairedSample:
    """Deterministic mosaic with an explicit joint point (see :func:`mosaic`)."""
    jx, jy = joint
    if not (0 < jx < out_size and 0 < jy < out_size):
        raise ValueError(f"joint {joint} must lie strictly inside the canvas")
    quadrants = [
        (0, 0, jx, jy),
        (jx, 0, out_size - jx, jy),
        (0, jy, jx, out_size - jy),
        (jx, jy, out_size - jx, out_size - jy),
    ]
    rgb_canvas = np.zeros((out_size, out_size, 3), dtype=np.uint8)
    tir_canvas = np.zeros((out_size, out_size, 1), dtype=np.uint8)
    boxes: list[BoundingBox] = []
    for sample, (qx, qy, qw, qh) in zip(samples, quadrants):
        h, w = sample.rgb.shape[:2]
        scale = max(qw / w, qh / h)
        sw, sh = max(qw, round(w * scale)), max(qh, round(h * scale))
        rgb_scaled = cv2.resize(sample.rgb, (sw, sh), interpolation=cv2.INTER_LINEAR)
        tir_scaled = cv2.resize(
            sample.tir[..., 0], (sw, sh), interpolation=cv2.INTER_LINEAR
        )
        rgb_canvas[qy : qy + qh, qx : qx + qw] = rgb_scaled[:qh, :qw]
        tir_canvas[qy : qy + qh, qx : qx + qw, 0] = tir_scaled[:qh, :qw]
        # boxes follow the actual resize factors, not the pre-rounding scale
        sx, sy = sw / w, sh / h
        for b in sample.boxes:
            scaled = BoundingBox(
                b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy,
                b.class_id, b.score,
            )
            kept = clip_box(scaled, qw, qh, min_area_frac)
            if kept is None:
                continue
            boxes.append(
                BoundingBox(
                    kept.x_min + qx, kept.y_min + qy,
                    kept.x_max + qx, kept.y_max + qy,
                    kept.class_id, kept.score,
                )
            )
    return PairedSample(
        rgb=rgb_canvas, tir=tir_canvas, boxes=boxes, meta=samples[0].meta
    )


# ---------------------------------------------------------------------------
# pipeline


def apply_pipeline(
    s: PairedSample, cfg: AugmentConfig, rng: RngStream
) -> PairedSample:
    """Run the full per-sample augmentation pipeline (see module docstring)."""
    out, _ = apply_pipeline_traced(s, cfg, rng)
    return out


def apply_pipeline_traced(
    s: PairedSample, cfg: AugmentConfig, rng: RngStream
) -> tuple[PairedSample, AugmentTrace]:
    """Like :func:`apply_pipeline` but also reports which ops were applied."""
    bad = cfg.validate()
    if bad:
        raise ValueError("invalid AugmentConfig: " + "; ".join(bad))
    trace = AugmentTrace()
    out = s.copy()

    if rng.bernoulli(cfg.p_noise):
        sigma = rng.uniform(0.0, cfg.noise_sigma)
        out.rgb = add_noise(out.rgb, sigma, rng)
        trace.noise_rgb = True
        trace.params["noise_sigma_rgb"] = sigma
    if rng.bernoulli(cfg.p_noise):
        sigma = rng.uniform(0.0, cfg.noise_sigma)
        out.tir = add_noise(out.tir, sigma, rng)
        trace.noise_tir = True
        trace.params["noise_sigma_tir"] = sigma

    if rng.bernoulli(cfg.p_brightness):
        factor = rng.uniform(*cfg.brightness_range)
        out.rgb = adjust_brightness(out.rgb, factor)
        trace.brightness = True
        trace.params["brightness"] = factor

    if rng.bernoulli(cfg.p_edge):
        strength = rng.uniform(*cfg.edge_strength)
        out.tir = edge_enhance(out.tir, strength)
        trace.edge = True
        trace.params["edge_strength"] = strength
    if rng.bernoulli(cfg.p_blur):
        sigma = rng.uniform(*cfg.blur_sigma_range)
        out.tir = gaussian_blur(out.tir, sigma)
        trace.blur = True
        trace.params["blur_sigma"] = sigma

    # at most one geometric op; rotation wins when both trigger
    want_rotate = rng.bernoulli(cfg.p_rotate)
    want_shift = rng.bernoulli(cfg.p_shift)
    if want_rotate or want_shift:
        if rng.bernoulli(cfg.p_one_sided):
            target = TARGET_RGB if rng.choice(2) == 0 else TARGET_TIR
        else:
            target = TARGET_BOTH
        if want_rotate:
            angle = rng.uniform(*cfg.rotate_range)
            out = rotate_sample(out, angle, target, cfg.min_area_frac)
            trace.geometric = ROTATE
            trace.params["angle"] = angle
        else:
            dx = rng.integer(cfg.shift_range[0], cfg.shift_range[1])
            dy = rng.integer(cfg.shift_range[0], cfg.shift_range[1])
            out = shift_sample(out, dx, dy, target, cfg.min_area_frac)
            trace.geometric = SHIFT
            trace.params["shift"] = (dx, dy)
        trace.target = target
    return out, trace


def augment_config_from_dict(d: dict) -> AugmentConfig:
    """Build an AugmentConfig from a mapping, rejecting unknown keys."""
    known = {f.name for f in fields(AugmentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
    kwargs = dict(d)
    for name in ("rotate_range", "shift_range", "brightness_range",
                 "edge_strength", "blur_sigma_range"):
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    cfg = AugmentConfig(**kwargs)
    bad = cfg.validate()
    if bad:
        raise ValueError("invalid augmentation config: " + "; ".join(bad))
    return cfg
