"""Per-modality convolutional feature extractors emitting 3-scale pyramids.

Each modality gets its own weight-independent backbone: a two-conv stride-2
stem followed by three stages of (stride-2 downsample + residual blocks),
producing feature maps at strides 8, 16 and 32. Block internals are plain
residual convolutions; the cross-modal machinery built on top does not
depend on them.

Normalization uses per-channel batch statistics in training mode and running
averages in inference mode; the switch is the standard module ``train()`` /
``eval()`` state. All normalizer state is float32, so checkpoints carry
nothing but float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and inference hyperparameters.

    ``fusion_dim=None`` means each scale's attention runs at that scale's own
    channel width. ``aux_weights`` are the training-time loss weights of the
    pre-fusion and post-fusion auxiliary heads.
    """

    num_classes: int
    stem_channels: int = 16
    channels: tuple[int, int, int] = (32, 64, 128)
    blocks_per_stage: int = 2
    fusion_heads: int = 4
    fusion_dim: int | None = None
    aux_weights: tuple[float, float] = (0.25, 0.25)
    conf_thresh: float = 0.25
    nms_iou: float = 0.5

    def validate(self) -> list[str]:
        out = []
        if self.num_classes <= 0:
            out.append(f"num_classes ({self.num_classes}) must be positive")
        if self.stem_channels <= 0:
            out.append(f"stem_channels ({self.stem_channels}) must be positive")
        if len(self.channels) != 3 or any(c <= 0 for c in self.channels):
            out.append(f"channels {self.channels} must be three positive ints")
        if self.blocks_per_stage <= 0:
            out.append(f"blocks_per_stage ({self.blocks_per_stage}) must be positive")
        if self.fusion_heads <= 0:
            out.append(f"fusion_heads ({self.fusion_heads}) must be positive")
        for d in self.scale_fusion_dims():
            if d % self.fusion_heads != 0:
                out.append(
                    f"attention width {d} not divisible by fusion_heads "
                    f"({self.fusion_heads})"
                )
        if any(w < 0 for w in self.aux_weights):
            out.append(f"aux_weights {self.aux_weights} must be non-negative")
        if not 0.0 <= self.conf_thresh <= 1.0:
            out.append(f"conf_thresh ({self.conf_thresh}) must lie in [0, 1]")
        if not 0.0 <= self.nms_iou <= 1.0:
            out.append(f"nms_iou ({self.nms_iou}) must lie in [0, 1]")
        return out

    def scale_fusion_dims(self) -> tuple[int, int, int]:
        if self.fusion_dim is None:
            return tuple(self.channels)
        return (self.fusion_dim,) * 3


def model_config_from_dict(d: dict) -> ModelConfig:
    """Build a ModelConfig from a mapping, rejecting unknown keys."""
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    kwargs = dict(d)
    if "channels" in kwargs:
        kwargs["channels"] = tuple(kwargs["channels"])
    if "aux_weights" in kwargs:
        kwargs["aux_weights"] = tuple(kwargs["aux_weights"])
    cfg = ModelConfig(**kwargs)
    bad = cfg.validate()
    if bad:
        raise ValueError("invalid model config: " + "; ".join(bad))
    return cfg


@dataclass
class FeaturePyramid:
    """Feature maps at strides 8/16/32, shaped (B, C_k, H/s_k, W/s_k)."""

    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor

    def maps(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (self.p3, self.p4, self.p5)


class ChannelNorm(nn.Module):
    """Batch normalization whose persistent state is float-only.

    Training mode normalizes with batch statistics and updates running
    averages; eval mode uses the stored running averages.
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.batch_norm(
            x,
            self.running_mean,
            self.running_var,
            self.weight,
            self.bias,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvNorm(nn.Module):
    """3x3 convolution + channel norm + SiLU."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm = ChannelNorm(c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.silu(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    """Two 3x3 convs with a skip connection: ``silu(x + f(x))``."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = ChannelNorm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = ChannelNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.silu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.silu(x + y)


class Backbone(nn.Module):
    """Stem (stride 4) + three stages producing a stride 8/16/32 pyramid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c3, c4, c5 = cfg.channels
        self.stem = nn.Sequential(
            ConvNorm(3, cfg.stem_channels, stride=2),
            ConvNorm(cfg.stem_channels, cfg.stem_channels, stride=2),
        )
        self.stage3 = self._stage(cfg.stem_channels, c3, cfg.blocks_per_stage)
        self.stage4 = self._stage(c3, c4, cfg.blocks_per_stage)
        self.stage5 = self._stage(c4, c5, cfg.blocks_per_stage)

    @staticmethod
    def _stage(c_in: int, c_out: int, blocks: int) -> nn.Sequential:
        layers: list[nn.Module] = [ConvNorm(c_in, c_out, stride=2)]
        layers.extend(ResidualBlock(c_out) for _ in range(blocks))
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"input dims must be divisible by 32, got {h}x{w}")
        y = self.stem(x)
        p3 = self.stage3(y)
        p4 = self.stage4(p3)
        p5 = self.stage5(p4)
        return FeaturePyramid(p3=p3, p4=p4, p5=p5)
