"""Global attention over the whole feature pyramid.

The four encoder maps are projected to a shared width, resized to the
finest (1/4) grid and averaged. One multi-head self-attention pass over that
averaged map produces a global context, which is resized back to every
stage, projected to the stage width and squashed to a gate that multiplies
the original feature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, Module, MultiHeadAttention
from .tensor import Tensor


@dataclass
class GamConfig:
    enabled: bool = True
    width: int = 128
    heads: int = 4
    # attend on a 1/8 grid instead of 1/4 to bound the token count
    attend_downsample: bool = False


class GlobalAttentionModule(Module):
    def __init__(self, enc_channels: list[int], cfg: GamConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if cfg.width % cfg.heads:
            raise ValueError(f"GAM width {cfg.width} is not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.unify_proj = [Conv2d(c, cfg.width, 1, rng=rng) for c in enc_channels]
        self.attn = MultiHeadAttention(cfg.width, cfg.heads, rng=rng)
        self.fuse_proj = [Conv2d(cfg.width, c, 1, rng=rng) for c in enc_channels]
        # None for the learned gate; a constant forces gate = value (ablation / testing)
        self.gate_override: float | None = None

    def unify(self, pyramid: list[Tensor]) -> list[Tensor]:
        target = pyramid[0].shape[-2:]
        return [F.bilinear_resize(proj(f), target) for proj, f in zip(self.unify_proj, pyramid)]

    @staticmethod
    def aggregate(unified: list[Tensor]) -> Tensor:
        shape = unified[0].shape
        for u in unified[1:]:
            if u.shape != shape:
                raise F.ShapeError(f"cannot average features of shapes {shape} and {u.shape}")
        total = unified[0]
        for u in unified[1:]:
            total = total + u
        return total * (1.0 / len(unified))

    def global_attend(self, f_avg: Tensor) -> Tensor:
        hw = f_avg.shape[-2:]
        if self.cfg.attend_downsample:
            hw = (max(1, hw[0] // 2), max(1, hw[1] // 2))
            f_avg = F.bilinear_resize(f_avg, hw)
        tokens = F.to_tokens(f_avg)
        return F.from_tokens(self.attn(tokens), hw)

    def gates(self, attended: Tensor, pyramid: list[Tensor]) -> list[Tensor]:
        return [F.sigmoid(proj(F.bilinear_resize(attended, f.shape[-2:])))
                for proj, f in zip(self.fuse_proj, pyramid)]

    def fuse(self, attended: Tensor, pyramid: list[Tensor]) -> list[Tensor]:
        return [g * f for g, f in zip(self.gates(attended, pyramid), pyramid)]

    def forward(self, pyramid: list[Tensor]) -> list[Tensor]:
        if self.gate_override is not None:
            return [f * self.gate_override for f in pyramid]
        attended = self.global_attend(self.aggregate(self.unify(pyramid)))
        return self.fuse(attended, pyramid)

    def macs(self, h: int, w: int) -> int:
        sizes = [(h >> (2 + i), w >> (2 + i)) for i in range(4)]
        total = sum(p.macs(*hw)[0] for p, hw in zip(self.unify_proj, sizes))
        ah, aw = sizes[0]
        if self.cfg.attend_downsample:
            ah, aw = max(1, ah // 2), max(1, aw // 2)
        total += self.attn.macs(ah * aw, ah * aw)
        total += sum(p.macs(*hw)[0] for p, hw in zip(self.fuse_proj, sizes))
        return total
