"""Figure rendering for run outputs.

Every report-producing command pairs its delimited output (JSON-lines logs,
detection files, CSV tables) with rendered PNG figures from here: training
loss curves, per-class precision-recall curves, detection overlays and
augmentation before/after previews.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as mpatches
import matplotlib.pyplot as plt

from .core import BoundingBox, PairedSample
from .traineval import EvalReport

_BOX_COLORS = ("tab:red", "tab:cyan", "tab:orange", "tab:green", "tab:purple",
               "tab:pink", "tab:olive", "tab:blue")


def render_loss_curves(log_path: str | Path, out_png: str | Path) -> Path:
    """Plot the loss components of a training log against step."""
    records = []
    with Path(log_path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, style in (
        ("total", {"color": "black", "linewidth": 1.8}),
        ("L_main", {"color": "tab:blue"}),
        ("L_pre_rgb", {"color": "tab:red", "alpha": 0.7}),
        ("L_pre_tir", {"color": "tab:cyan", "alpha": 0.7}),
        ("L_post", {"color": "tab:green", "alpha": 0.7}),
    ):
        ax.plot(steps, [r[key] for r in records], label=key, **style)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_pr_curves(
    report: EvalReport, class_names: Sequence[str], out_png: str | Path
) -> Path:
    """Plot every evaluated class's precision-recall curve."""
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for c, (recall, precision) in sorted(report.pr_curves.items()):
        name = class_names[c] if c < len(class_names) else str(c)
        ap = report.per_class_ap.get(c, 0.0)
        if recall.size:
            ax.plot(recall, precision, label=f"{name} (AP {ap:.3f})",
                    color=_BOX_COLORS[c % len(_BOX_COLORS)])
        else:
            ax.plot([], [], label=f"{name} (AP {ap:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"mAP@{report.iou_thresh:.2f} = {report.map_value:.4f}")
    ax.legend(loc="lower left", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def write_per_class_csv(
    report: EvalReport, class_names: Sequence[str], out_csv: str | Path
) -> Path:
    """Write the per-class AP/TP/FP/FN table next to the figures."""
    out = Path(out_csv)
    with out.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "class_name", "ap", "tp", "fp", "fn"])
        for c in sorted(report.counts):
            tp, fp, fn = report.counts[c]
            name = class_names[c] if c < len(class_names) else str(c)
            ap = report.per_class_ap.get(c, "")
            writer.writerow([c, name, ap, tp, fp, fn])
    return out


def _draw_boxes(ax, boxes: Sequence[BoundingBox], class_names: Sequence[str]):
    for b in boxes:
        color = _BOX_COLORS[b.class_id % len(_BOX_COLORS)]
        ax.add_patch(
            mpatches.Rectangle(
                (b.x_min, b.y_min), b.width(), b.height(),
                fill=False, edgecolor=color, linewidth=1.5,
            )
        )
        label = class_names[b.class_id] if b.class_id < len(class_names) else str(b.class_id)
        if b.score is not None:
            label = f"{label} {b.score:.2f}"
        ax.text(b.x_min, b.y_min - 2, label, color=color, fontsize=7)


def render_detections(
    sample: PairedSample,
    boxes: Sequence[BoundingBox],
    class_names: Sequence[str],
    out_png: str | Path,
) -> Path:
    """Overlay detections on both modalities side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 5))
    axes[0].imshow(sample.rgb)
    axes[0].set_title("rgb")
    axes[1].imshow(sample.tir[..., 0], cmap="gray")
    axes[1].set_title("tir")
    for ax in axes:
        _draw_boxes(ax, boxes, class_names)
        ax.set_axis_off()
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_augment_preview(
    before: PairedSample,
    after: PairedSample,
    class_names: Sequence[str],
    out_png: str | Path,
) -> Path:
    """2x2 before/after grid of both modalities with their boxes."""
    fig, axes = plt.subplots(2, 2, figsize=(9, 9))
    panels = (
        (axes[0][0], before.rgb, before.boxes, "rgb before"),
        (axes[0][1], after.rgb, after.boxes, "rgb after"),
        (axes[1][0], before.tir[..., 0], before.boxes, "tir before"),
        (axes[1][1], after.tir[..., 0], after.boxes, "tir after"),
    )
    for ax, img, boxes, title in panels:
        if img.ndim == 2:
            ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        else:
            ax.imshow(img)
        _draw_boxes(ax, boxes, class_names)
        ax.set_title(title)
        ax.set_axis_off()
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
