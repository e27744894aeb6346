"""Full detector assembly: dual backbones, fusion, neck and four heads.

Parameters are grouped by branch tag, which is simply the top-level
submodule name::

    backbone_rgb   visible-light feature extractor
    backbone_tir   thermal feature extractor
    fusion         cross-modal attention fusion (three scales)
    neck           per-scale convolutions between fusion and the main head
    head_main      the inference head, applied after the neck
    head_aux_pre   training-only heads on the two pre-fusion pyramids
    head_aux_post  training-only head on the fused pyramid (before the neck)

Auxiliary heads are pure sinks: no main-path activation depends on them, so
:func:`strip_aux` removes them without changing inference output.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, ConvNorm, FeaturePyramid, ModelConfig
from .heads import DetectionHead, RawPredictions

BRANCH_TAGS = (
    "backbone_rgb",
    "backbone_tir",
    "fusion",
    "neck",
    "head_main",
    "head_aux_pre",
    "head_aux_post",
)
AUX_TAGS = ("head_aux_pre", "head_aux_post")


class DualDetector(nn.Module):
    def __init__(self, cfg: ModelConfig, with_aux: bool = True):
        super().__init__()
        bad = cfg.validate()
        if bad:
            raise ValueError("invalid model config: " + "; ".join(bad))
        from .fusion import PyramidFusion

        self.cfg = cfg
        self.with_aux = with_aux
        self.backbone_rgb = Backbone(cfg)
        self.backbone_tir = Backbone(cfg)
        self.fusion = PyramidFusion(cfg)
        self.neck = nn.ModuleList(
            nn.Sequential(ConvNorm(c, c), ConvNorm(c, c)) for c in cfg.channels
        )
        self.head_main = DetectionHead(cfg)
        if with_aux:
            self.head_aux_pre = nn.ModuleDict(
                {"rgb": DetectionHead(cfg), "tir": DetectionHead(cfg)}
            )
            self.head_aux_post = DetectionHead(cfg)

    def _apply_neck(self, pyr: FeaturePyramid) -> FeaturePyramid:
        maps = [stage(f) for stage, f in zip(self.neck, pyr.maps())]
        return FeaturePyramid(p3=maps[0], p4=maps[1], p5=maps[2])

    def forward(
        self, rgb: torch.Tensor, tir: torch.Tensor
    ) -> dict[str, RawPredictions]:
        """Run all active heads; keys: main, and pre_rgb/pre_tir/post if
        auxiliary heads are present."""
        pyr_rgb = self.backbone_rgb(rgb)
        pyr_tir = self.backbone_tir(tir)
        fused = self.fusion(pyr_rgb, pyr_tir)
        out = {"main": self.head_main(self._apply_neck(fused))}
        if self.with_aux:
            out["pre_rgb"] = self.head_aux_pre["rgb"](pyr_rgb)
            out["pre_tir"] = self.head_aux_pre["tir"](pyr_tir)
            out["post"] = self.head_aux_post(fused)
        return out

    def forward_main(self, rgb: torch.Tensor, tir: torch.Tensor) -> RawPredictions:
        """Main-head-only forward used at inference time."""
        pyr_rgb = self.backbone_rgb(rgb)
        pyr_tir = self.backbone_tir(tir)
        fused = self.fusion(pyr_rgb, pyr_tir)
        return self.head_main(self._apply_neck(fused))


def init_params(cfg: ModelConfig, seed: int) -> DualDetector:
    """Deterministically initialize a full model (aux heads included).

    Weights use torch's fan-in-scaled uniform defaults; the construction
    order is fixed, so the same seed always yields identical parameters.
    The model is returned in eval mode.
    """
    torch.manual_seed(seed)
    model = DualDetector(cfg, with_aux=True)
    model.eval()
    return model


def strip_aux(model: DualDetector) -> DualDetector:
    """Return a copy of the model without auxiliary heads.

    Idempotent; the stripped model's inference output is bit-identical to
    the original's main head.
    """
    new = DualDetector(model.cfg, with_aux=False)
    state = {
        k: v.clone()
        for k, v in model.state_dict().items()
        if not k.startswith(AUX_TAGS)
    }
    new.load_state_dict(state, strict=True)
    new.eval()
    return new


def backbone_forward(
    model: DualDetector, img: torch.Tensor, branch: str
) -> FeaturePyramid:
    """Run one modality's backbone; ``branch`` is ``rgb`` or ``tir``."""
    if branch == "rgb":
        return model.backbone_rgb(img)
    if branch == "tir":
        return model.backbone_tir(img)
    raise ValueError(f"unknown backbone branch {branch!r}")


def head_forward(
    model: DualDetector, pyr: FeaturePyramid, head_tag: str
) -> RawPredictions:
    """Run one head on a caller-supplied pyramid.

    The caller provides the pyramid each head expects: the pre-fusion
    modality pyramid for ``aux_pre_*``, the fused pyramid for ``aux_post``
    and the post-neck pyramid for ``main``.
    """
    if head_tag == "main":
        return model.head_main(pyr)
    if not model.with_aux:
        raise ValueError(f"model has no auxiliary heads, cannot run {head_tag!r}")
    if head_tag == "aux_pre_rgb":
        return model.head_aux_pre["rgb"](pyr)
    if head_tag == "aux_pre_tir":
        return model.head_aux_pre["tir"](pyr)
    if head_tag == "aux_post":
        return model.head_aux_post(pyr)
    raise ValueError(f"unknown head tag {head_tag!r}")


def params_by_branch(model: DualDetector) -> dict[str, dict[str, torch.Tensor]]:
    """Group the full model state (parameters and buffers) by branch tag."""
    groups: dict[str, dict[str, torch.Tensor]] = {t: {} for t in BRANCH_TAGS}
    for name, tensor in model.state_dict().items():
        tag = name.split(".", 1)[0]
        if tag not in groups:
            raise ValueError(f"state entry {name!r} outside known branch tags")
        groups[tag][name] = tensor
    return groups


def parameter_count(model: DualDetector) -> int:
    return sum(p.numel() for p in model.parameters())


def aux_state_bytes(model: DualDetector) -> int:
    """Bytes of float32 payload belonging to auxiliary-head state."""
    return sum(
        4 * v.numel()
        for k, v in model.state_dict().items()
        if k.startswith(AUX_TAGS)
    )


def images_to_input(
    rgb: np.ndarray, tir: np.ndarray, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Convert uint8 image batches to scaled backbone input tensors.

    ``rgb`` is (B, H, W, 3) and ``tir`` (B, H, W, 1); both come back as
    (B, 3, H, W) in [0, 1], the thermal channel replicated to 3 channels.
    """
    if rgb.ndim != 4 or tir.ndim != 4:
        raise ValueError("expected batched (B, H, W, C) image arrays")
    rgb_t = torch.from_numpy(rgb.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    tir_t = torch.from_numpy(tir.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    return rgb_t.to(dtype), tir_t.expand(-1, 3, -1, -1).to(dtype)
