"""Anchor-free detection heads, target assignment and loss assembly.

Prediction layout per scale: a ``(B, 5 + num_classes, h, w)`` grid whose
channels are box offsets ``(tx, ty, tw, th)``, an objectness logit, then one
logit per class. A cell ``(i, j)`` at stride ``s`` decodes to::

    cx = (j + sigmoid(tx)) * s      w = exp(tw) * s
    cy = (i + sigmoid(ty)) * s      h = exp(th) * s

Target assignment is deterministic single-assignment: every ground-truth
box goes to the scale whose size bracket contains its longer side and to the
cell containing its center; cell collisions are won by the larger box, and
losers move to the nearest free neighboring cell or are dropped (counted).

Four heads share this structure with independent weights: the main head on
the post-neck features, one auxiliary head per modality on the pre-fusion
pyramids and one on the fused pyramid. Auxiliary heads contribute loss only;
nothing downstream reads their outputs, so they can be stripped for
inference without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import STRIDES, ConvNorm, FeaturePyramid, ModelConfig
from .core import BoundingBox, clip_box

HEAD_TAGS = ("main", "aux_pre_rgb", "aux_pre_tir", "aux_post")

# size brackets (pixels of the longer box side) routing boxes to scales,
# sized for ~640px inputs
P4_MIN_SIDE = 64.0
P5_MIN_SIDE = 128.0

# keeps the in-cell offset away from the sigmoid's saturated ends
_ENCODE_EPS = 1e-6

# box/objectness/class loss weights
_LOSS_WEIGHTS = (5.0, 1.0, 0.5)

# objectness bias prior ~= 1% positive cells at initialization
_OBJ_BIAS_INIT = -4.595119850134589

# initial decoded box sizes sit mid-bracket per scale (40/96/192 px), so
# fresh predictions overlap their targets and the IoU loss has gradient
# from step one; a near-zero size init can collapse irrecoverably
_SIZE_BIAS_INIT = (1.6094379124341003, 1.791759469228055, 1.791759469228055)


@dataclass
class RawPredictions:
    """Per-scale prediction grids of one head, shaped (B, 5+nc, h, w)."""

    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor

    def maps(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (self.p3, self.p4, self.p5)


@dataclass
class ScaleTargets:
    """Assignment result on one scale's grid."""

    obj: np.ndarray          # (h, w) float, 1 at positive cells
    box_enc: np.ndarray      # (h, w, 4) encoded (tx, ty, tw, th)
    box_corner: np.ndarray   # (h, w, 4) ground-truth corners
    cls: np.ndarray          # (h, w) int class id, -1 where negative
    mask: np.ndarray         # (h, w) bool positive mask


@dataclass
class TargetMap:
    p3: ScaleTargets
    p4: ScaleTargets
    p5: ScaleTargets
    dropped: int = 0

    def scales(self) -> tuple[ScaleTargets, ScaleTargets, ScaleTargets]:
        return (self.p3, self.p4, self.p5)


class DetectionHead(nn.Module):
    """Two 3x3 conv layers then a 1x1 projection, independently per scale."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_classes = cfg.num_classes
        out_ch = 5 + cfg.num_classes
        self.towers = nn.ModuleList()
        self.projections = nn.ModuleList()
        for c, size_bias in zip(cfg.channels, _SIZE_BIAS_INIT):
            self.towers.append(nn.Sequential(ConvNorm(c, c), ConvNorm(c, c)))
            proj = nn.Conv2d(c, out_ch, 1, bias=True)
            with torch.no_grad():
                proj.bias[2] = size_bias
                proj.bias[3] = size_bias
                proj.bias[4] = _OBJ_BIAS_INIT
            self.projections.append(proj)

    def forward(self, pyr: FeaturePyramid) -> RawPredictions:
        outs = [
            proj(tower(f))
            for tower, proj, f in zip(self.towers, self.projections, pyr.maps())
        ]
        return RawPredictions(p3=outs[0], p4=outs[1], p5=outs[2])


# ---------------------------------------------------------------------------
# decoding


def decode_grid(raw: torch.Tensor, stride: int) -> torch.Tensor:
    """Decode one scale's raw grid into corner boxes, differentiably.

    Input (B, 5+nc, h, w); output (B, h, w, 4) as (x_min, y_min, x_max,
    y_max) in input-image pixels.
    """
    b, _, h, w = raw.shape
    jj = torch.arange(w, dtype=raw.dtype, device=raw.device).view(1, 1, w)
    ii = torch.arange(h, dtype=raw.dtype, device=raw.device).view(1, h, 1)
    cx = (jj + torch.sigmoid(raw[:, 0])) * stride
    cy = (ii + torch.sigmoid(raw[:, 1])) * stride
    bw = torch.exp(raw[:, 2]) * stride
    bh = torch.exp(raw[:, 3]) * stride
    return torch.stack(
        (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), dim=-1
    )


def decode(
    raw: RawPredictions, conf_thresh: float
) -> list[list[BoundingBox]]:
    """Turn raw grids into per-image box lists, clipped to the input frame.

    Scores are ``sigmoid(obj) * max_c sigmoid(cls_c)``; boxes under
    ``conf_thresh`` are dropped. Frame size is inferred from the stride-8
    grid.
    """
    h3, w3 = raw.p3.shape[2], raw.p3.shape[3]
    frame_w, frame_h = w3 * STRIDES[0], h3 * STRIDES[0]
    batch = raw.p3.shape[0]
    out: list[list[BoundingBox]] = [[] for _ in range(batch)]
    with torch.no_grad():
        for grid, stride in zip(raw.maps(), STRIDES):
            corners = decode_grid(grid, stride)
            obj = torch.sigmoid(grid[:, 4])
            cls = torch.sigmoid(grid[:, 5:])
            best_cls, best_id = cls.max(dim=1)
            score = obj * best_cls
            keep = score >= conf_thresh
            for b in range(batch):
                idx = keep[b].nonzero(as_tuple=False)
                for i, j in idx.tolist():
                    x0, y0, x1, y1 = corners[b, i, j].tolist()
                    box = BoundingBox(
                        x_min=x0, y_min=y0, x_max=x1, y_max=y1,
                        class_id=int(best_id[b, i, j]),
                        score=float(score[b, i, j]),
                    )
                    clipped = clip_box(box, frame_w, frame_h, min_area_frac=0.0)
                    if clipped is not None:
                        out[b].append(clipped)
    return out


# ---------------------------------------------------------------------------
# target assignment


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def encode_box(b: BoundingBox, stride: int, cell: tuple[int, int]) -> np.ndarray:
    """Inverse of the decode transform for a box assigned to ``cell``."""
    i, j = cell
    cx = (b.x_min + b.x_max) / 2.0
    cy = (b.y_min + b.y_max) / 2.0
    fx = np.clip(cx / stride - j, _ENCODE_EPS, 1.0 - _ENCODE_EPS)
    fy = np.clip(cy / stride - i, _ENCODE_EPS, 1.0 - _ENCODE_EPS)
    return np.array(
        [
            _logit(fx),
            _logit(fy),
            np.log((b.x_max - b.x_min) / stride),
            np.log((b.y_max - b.y_min) / stride),
        ],
        dtype=np.float64,
    )


def _scale_for_box(b: BoundingBox) -> int:
    side = max(b.x_max - b.x_min, b.y_max - b.y_min)
    if side < P4_MIN_SIDE:
        return 0
    if side < P5_MIN_SIDE:
        return 1
    return 2


def assign_targets(
    gt: list[BoundingBox],
    grid_sizes: list[tuple[int, int]] | tuple[tuple[int, int], ...],
    num_classes: int,
) -> TargetMap:
    """Deterministically assign ground truth boxes to (scale, cell) slots."""
    scales = []
    for h, w in grid_sizes:
        scales.append(
            ScaleTargets(
                obj=np.zeros((h, w), dtype=np.float64),
                box_enc=np.zeros((h, w, 4), dtype=np.float64),
                box_corner=np.zeros((h, w, 4), dtype=np.float64),
                cls=np.full((h, w), -1, dtype=np.int64),
                mask=np.zeros((h, w), dtype=bool),
            )
        )
    dropped = 0
    order = sorted(range(len(gt)), key=lambda k: (-gt[k].area(), k))
    for k in order:
        b = gt[k]
        if b.class_id >= num_classes:
            raise ValueError(
                f"box class_id {b.class_id} >= num_classes {num_classes}"
            )
        si = _scale_for_box(b)
        st = scales[si]
        stride = STRIDES[si]
        h, w = st.obj.shape
        cx = (b.x_min + b.x_max) / 2.0
        cy = (b.y_min + b.y_max) / 2.0
        i = min(int(cy // stride), h - 1)
        j = min(int(cx // stride), w - 1)
        cell = None
        if not st.mask[i, j]:
            cell = (i, j)
        else:
            best = None
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    ni, nj = i + di, j + dj
                    if not (0 <= ni < h and 0 <= nj < w) or st.mask[ni, nj]:
                        continue
                    ccx, ccy = (nj + 0.5) * stride, (ni + 0.5) * stride
                    d = (ccx - cx) ** 2 + (ccy - cy) ** 2
                    key = (d, ni, nj)
                    if best is None or key < best:
                        best = key
            if best is not None:
                cell = (best[1], best[2])
        if cell is None:
            dropped += 1
            continue
        ci, cj = cell
        st.mask[ci, cj] = True
        st.obj[ci, cj] = 1.0
        st.cls[ci, cj] = b.class_id
        st.box_enc[ci, cj] = encode_box(b, stride, cell)
        st.box_corner[ci, cj] = (b.x_min, b.y_min, b.x_max, b.y_max)
    return TargetMap(p3=scales[0], p4=scales[1], p5=scales[2], dropped=dropped)


# ---------------------------------------------------------------------------
# losses


def _pairwise_iou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of (N, 4) corner-box tensors, differentiable."""
    ix = torch.clamp(
        torch.minimum(pred[:, 2], gt[:, 2]) - torch.maximum(pred[:, 0], gt[:, 0]),
        min=0.0,
    )
    iy = torch.clamp(
        torch.minimum(pred[:, 3], gt[:, 3]) - torch.maximum(pred[:, 1], gt[:, 1]),
        min=0.0,
    )
    inter = ix * iy
    area_p = (pred[:, 2] - pred[:, 0]).clamp(min=0) * (pred[:, 3] - pred[:, 1]).clamp(min=0)
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    return inter / (area_p + area_g - inter + 1e-9)


def detection_loss(
    raw: RawPredictions, targets: list[TargetMap]
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Box + objectness + class loss of one head against batch targets.

    Returns ``(total, components)`` where total is
    ``5 * box + 1 * obj + 0.5 * cls``. Box and class terms average over
    positive cells (exactly zero when there are none); objectness is binary
    cross-entropy over every cell of every scale, normalized separately
    over positive and negative cells. The split normalization matters:
    positives are a few cells in thousands, and averaging both groups
    together starves them of gradient at desk scale.
    """
    if len(targets) != raw.p3.shape[0]:
        raise ValueError(
            f"batch mismatch: {raw.p3.shape[0]} predictions vs {len(targets)} targets"
        )
    device = raw.p3.device
    dtype = raw.p3.dtype

    obj_logits: list[torch.Tensor] = []
    obj_targets: list[torch.Tensor] = []
    pred_boxes: list[torch.Tensor] = []
    gt_boxes: list[torch.Tensor] = []
    cls_logits: list[torch.Tensor] = []
    cls_targets: list[torch.Tensor] = []
    num_classes = raw.p3.shape[1] - 5

    for grid, stride, scale_idx in zip(raw.maps(), STRIDES, range(3)):
        scale_targets = [t.scales()[scale_idx] for t in targets]
        obj_t = torch.as_tensor(
            np.stack([st.obj for st in scale_targets]), dtype=dtype, device=device
        )
        obj_logits.append(grid[:, 4].reshape(-1))
        obj_targets.append(obj_t.reshape(-1))

        mask = np.stack([st.mask for st in scale_targets])
        if mask.any():
            midx = torch.as_tensor(np.argwhere(mask), device=device)
            bsel, isel, jsel = midx[:, 0], midx[:, 1], midx[:, 2]
            corners = decode_grid(grid, stride)
            pred_boxes.append(corners[bsel, isel, jsel])
            gt_np = np.stack([st.box_corner for st in scale_targets])
            gt_boxes.append(
                torch.as_tensor(gt_np[mask], dtype=dtype, device=device)
            )
            cls_logits.append(grid[:, 5:].permute(0, 2, 3, 1)[bsel, isel, jsel])
            cls_np = np.stack([st.cls for st in scale_targets])[mask]
            onehot = np.eye(num_classes, dtype=np.float64)[cls_np]
            cls_targets.append(torch.as_tensor(onehot, dtype=dtype, device=device))

    logits_all = torch.cat(obj_logits)
    targets_all = torch.cat(obj_targets)
    positive = targets_all > 0.5
    zero = torch.zeros((), dtype=dtype, device=device)
    obj_loss = zero
    if (~positive).any():
        obj_loss = obj_loss + F.binary_cross_entropy_with_logits(
            logits_all[~positive], targets_all[~positive]
        )
    if positive.any():
        obj_loss = obj_loss + F.binary_cross_entropy_with_logits(
            logits_all[positive], targets_all[positive]
        )
    if pred_boxes:
        box_loss = (1.0 - _pairwise_iou(torch.cat(pred_boxes), torch.cat(gt_boxes))).mean()
        cls_loss = F.binary_cross_entropy_with_logits(
            torch.cat(cls_logits), torch.cat(cls_targets)
        )
    else:
        box_loss = zero
        cls_loss = zero
    wb, wo, wc = _LOSS_WEIGHTS
    total = wb * box_loss + wo * obj_loss + wc * cls_loss
    return total, {"box": box_loss, "obj": obj_loss, "cls": cls_loss}


def total_loss(
    main_loss: torch.Tensor,
    aux_losses: dict[str, torch.Tensor],
    aux_weights: tuple[float, float],
) -> torch.Tensor:
    """Weighted sum of the main head loss and the auxiliary head losses.

    ``aux_losses`` carries ``pre_rgb``, ``pre_tir`` and ``post`` entries;
    ``aux_weights`` is ``(lambda_pre, lambda_post)``.
    """
    lam_pre, lam_post = aux_weights
    return (
        main_loss
        + lam_pre * (aux_losses["pre_rgb"] + aux_losses["pre_tir"])
        + lam_post * aux_losses["post"]
    )
