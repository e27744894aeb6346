"""Bidirectional cross-modal attention fusion of the two feature pyramids.

Each scale is fused independently: both modality maps are projected to the
attention width, each direction attends to the other (queries from one
modality, keys/values from the other), the two attended sequences are
concatenated and projected back to the scale's channel count, and the mean
of the raw inputs is added as a residual path. The residual keeps the module
well-behaved at initialization and makes the zero-weight case collapse to
plain modality averaging.

Token layout: feature maps flatten row-major over spatial positions, so
token ``k`` of an ``h x w`` map sits at ``(k // w, k % w)``.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .backbone import FeaturePyramid, ModelConfig


def tokens_from_map(f: torch.Tensor) -> torch.Tensor:
    """Flatten (B, C, h, w) or (C, h, w) maps into (B, N, C) / (N, C) tokens."""
    if f.ndim == 3:
        c, h, w = f.shape
        return f.reshape(c, h * w).transpose(0, 1)
    if f.ndim == 4:
        b, c, h, w = f.shape
        return f.reshape(b, c, h * w).transpose(1, 2)
    raise ValueError(f"expected 3 or 4 dims, got shape {tuple(f.shape)}")


def map_from_tokens(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`tokens_from_map`; bit-exact round trip."""
    if t.ndim == 2:
        n, c = t.shape
        if n != h * w:
            raise ValueError(f"{n} tokens cannot form an {h}x{w} map")
        return t.transpose(0, 1).reshape(c, h, w)
    if t.ndim == 3:
        b, n, c = t.shape
        if n != h * w:
            raise ValueError(f"{n} tokens cannot form an {h}x{w} map")
        return t.transpose(1, 2).reshape(b, c, h, w)
    raise ValueError(f"expected 2 or 3 dims, got shape {tuple(t.shape)}")


class CrossAttention(nn.Module):
    """Multi-head attention with queries from one sequence, keys/values
    from another. Attention rows are softmax-normalized, so each sums to 1.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q_src: torch.Tensor, kv_src: torch.Tensor) -> torch.Tensor:
        squeeze = q_src.ndim == 2
        if squeeze:
            q_src = q_src.unsqueeze(0)
            kv_src = kv_src.unsqueeze(0)
        if q_src.shape[0] != kv_src.shape[0] or q_src.shape[2] != kv_src.shape[2]:
            raise ValueError(
                f"sequence shapes incompatible: {tuple(q_src.shape)} vs "
                f"{tuple(kv_src.shape)}"
            )
        if q_src.shape[2] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {q_src.shape[2]}")
        b, n, _ = q_src.shape
        m = kv_src.shape[1]

        def split(x: torch.Tensor) -> torch.Tensor:
            return x.reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(q_src))
        k = split(self.k_proj(kv_src))
        v = split(self.v_proj(kv_src))
        attn = torch.softmax(
            q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1
        )
        out = (attn @ v).transpose(1, 2).reshape(b, n, self.dim)
        out = self.out_proj(out)
        return out.squeeze(0) if squeeze else out

    def attention_weights(
        self, q_src: torch.Tensor, kv_src: torch.Tensor
    ) -> torch.Tensor:
        """Return the (B, heads, N, M) softmax attention matrix."""
        squeeze = q_src.ndim == 2
        if squeeze:
            q_src = q_src.unsqueeze(0)
            kv_src = kv_src.unsqueeze(0)
        b = q_src.shape[0]

        def split(x: torch.Tensor) -> torch.Tensor:
            return x.reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(q_src))
        k = split(self.k_proj(kv_src))
        attn = torch.softmax(
            q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1
        )
        return attn.squeeze(0) if squeeze else attn


class ScaleFusion(nn.Module):
    """Fuse one scale's RGB and TIR maps into a single map of equal shape."""

    def __init__(self, channels: int, dim: int, heads: int):
        super().__init__()
        self.channels = channels
        self.dim = dim
        self.proj_rgb = nn.Linear(channels, dim)
        self.proj_tir = nn.Linear(channels, dim)
        self.attend_rgb_to_tir = CrossAttention(dim, heads)
        self.attend_tir_to_rgb = CrossAttention(dim, heads)
        self.out_proj = nn.Linear(2 * dim, channels)

    def forward(self, f_rgb: torch.Tensor, f_tir: torch.Tensor) -> torch.Tensor:
        if f_rgb.shape != f_tir.shape:
            raise ValueError(
                f"modality shapes differ: {tuple(f_rgb.shape)} vs {tuple(f_tir.shape)}"
            )
        h, w = f_rgb.shape[-2], f_rgb.shape[-1]
        t_rgb = self.proj_rgb(tokens_from_map(f_rgb))
        t_tir = self.proj_tir(tokens_from_map(f_tir))
        u = t_rgb + self.attend_rgb_to_tir(t_rgb, t_tir)
        v = t_tir + self.attend_tir_to_rgb(t_tir, t_rgb)
        fused_tokens = self.out_proj(torch.cat((u, v), dim=-1))
        fused = map_from_tokens(fused_tokens, h, w)
        return fused + (f_rgb + f_tir) / 2


class PyramidFusion(nn.Module):
    """Independent ScaleFusion per pyramid level with disjoint parameters."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = cfg.scale_fusion_dims()
        self.p3 = ScaleFusion(cfg.channels[0], dims[0], cfg.fusion_heads)
        self.p4 = ScaleFusion(cfg.channels[1], dims[1], cfg.fusion_heads)
        self.p5 = ScaleFusion(cfg.channels[2], dims[2], cfg.fusion_heads)

    def forward(
        self, pyr_rgb: FeaturePyramid, pyr_tir: FeaturePyramid
    ) -> FeaturePyramid:
        return FeaturePyramid(
            p3=self.p3(pyr_rgb.p3, pyr_tir.p3),
            p4=self.p4(pyr_rgb.p4, pyr_tir.p4),
            p5=self.p5(pyr_rgb.p5, pyr_tir.p5),
        )


def fuse_scale(
    fusion: ScaleFusion, f_rgb: torch.Tensor, f_tir: torch.Tensor
) -> torch.Tensor:
    return fusion(f_rgb, f_tir)


def fuse_pyramid(
    fusion: PyramidFusion, pyr_rgb: FeaturePyramid, pyr_tir: FeaturePyramid
) -> FeaturePyramid:
    return fusion(pyr_rgb, pyr_tir)
