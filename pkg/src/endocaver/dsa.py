"""Cross-task aligner between the segmentation and deblurring decoders.

Per decoder stage: the segmentation feature first attends to the enhanced
encoder feature of the same resolution, goes through the stage's recovery
block, receives the encoder residual, and then attends to the latent
deblurring feature. Information only flows deblurring -> segmentation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .nn import Module, MultiHeadAttention
from .tensor import Tensor, stop_gradient


@dataclass
class DsaConfig:
    enabled: bool = True
    heads: int = 2
    stages: list[int] = field(default_factory=lambda: [0, 1])
    stop_gradient: bool = False


class CrossAttention(Module):
    """Queries from one feature map, keys/values from another, plus a residual from the query."""

    def __init__(self, query_channels: int, context_channels: int, heads: int, rng=None):
        super().__init__()
        self.attn = MultiHeadAttention(query_channels, heads, context_dim=context_channels, rng=rng)

    def forward(self, query_feat: Tensor, context_feat: Tensor) -> Tensor:
        if context_feat.shape[-1] * context_feat.shape[-2] == 0:
            raise ValueError("cross-attention context is empty")
        hw = query_feat.shape[-2:]
        out = self.attn(F.to_tokens(query_feat), F.to_tokens(context_feat))
        return query_feat + F.from_tokens(out, hw)

    def macs(self, lq: int, lk: int) -> int:
        return self.attn.macs(lq, lk)


def cross_attend(module: CrossAttention, query_feat: Tensor, context_feat: Tensor) -> Tensor:
    return module(query_feat, context_feat)


class Aligner(Module):
    """Two-stage aligner for one segmentation-decoder stage."""

    def __init__(self, seg_in: int, enc_channels: int, seg_out: int, latent_channels: int, cfg: DsaConfig,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.stop_gradient = cfg.stop_gradient
        self.align = CrossAttention(seg_in, enc_channels, cfg.heads, rng)
        self.inject = CrossAttention(seg_out, latent_channels, cfg.heads, rng)

    def stage1(self, f_s: Tensor, f_enc: Tensor, refine) -> Tensor:
        if f_enc.shape[-2:] != f_s.shape[-2:]:
            raise F.ShapeError(f"aligner stage mismatch: segmentation feature at {f_s.shape[-2:]}, "
                               f"enhanced feature at {f_enc.shape[-2:]}")
        return refine(self.align(f_s, f_enc))

    def stage2(self, f_s_prime: Tensor, f_i: Tensor | None, f_d: Tensor) -> Tensor:
        query = f_s_prime
        if f_i is not None:
            if f_i.shape != f_s_prime.shape:
                raise F.ShapeError(f"residual feature {f_i.shape} incompatible with {f_s_prime.shape}")
            query = f_s_prime + f_i
        if self.stop_gradient:
            f_d = stop_gradient(f_d)
        f_d = F.bilinear_resize(f_d, query.shape[-2:])
        return self.inject(query, f_d)

    def forward(self, f_s: Tensor, f_enc: Tensor, refine, f_i: Tensor | None, f_d: Tensor | None) -> Tensor:
        if f_d is None:
            raise RuntimeError("aligner needs the latent deblurring feature: run the deblurring decoder first")
        return self.stage2(self.stage1(f_s, f_enc, refine), f_i, f_d)

    def macs(self, h: int, w: int) -> int:
        """``h x w`` is the stage input resolution; the refined feature is at twice that."""
        lq = h * w
        return self.align.macs(lq, lq) + self.inject.macs(4 * lq, 4 * lq)
