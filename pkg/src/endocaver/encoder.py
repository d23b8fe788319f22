"""Hierarchical four-stage transformer encoder (Mix-Transformer layout).

Each stage is an overlapping patch-merge convolution followed by ``depth``
transformer blocks whose attention reads keys/values from a spatially
reduced copy of the tokens, and a Mix-FFN with a depthwise 3x3 conv.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .nn import Conv2d, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor


@dataclass
class EncoderConfig:
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    heads: list[int] = field(default_factory=lambda: [1, 1, 2, 4])
    sr_ratios: list[int] = field(default_factory=lambda: [8, 4, 2, 1])
    patch_kernels: list[int] = field(default_factory=lambda: [7, 3, 3, 3])
    patch_strides: list[int] = field(default_factory=lambda: [4, 2, 2, 2])
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        lists = (self.channels, self.depths, self.heads, self.sr_ratios, self.patch_kernels, self.patch_strides)
        if any(len(v) != 4 for v in lists):
            raise ValueError("encoder config needs exactly 4 stages")
        if self.patch_strides[0] != 4 or any(s != 2 for s in self.patch_strides[1:]):
            raise ValueError("stage 1 must downsample by 4 and stages 2-4 by 2")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError("stage channels must be nondecreasing")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ValueError(f"stage width {c} not divisible by {h} heads")

    @classmethod
    def paper_scale(cls) -> EncoderConfig:
        return cls(channels=[32, 64, 160, 256], depths=[2, 2, 2, 2], heads=[1, 2, 5, 8])


class EfficientAttention(Module):
    """Self-attention whose keys/values come from an ``sr x sr`` strided reduction."""

    def __init__(self, dim: int, heads: int, sr: int, rng):
        super().__init__()
        self.sr = sr
        self.attn = MultiHeadAttention(dim, heads, rng=rng)
        if sr > 1:
            self.reduce = Conv2d(dim, dim, sr, sr, rng=rng)
            self.reduce_norm = LayerNorm(dim)

    def forward(self, tokens: Tensor, hw: tuple[int, int]) -> Tensor:
        context = tokens
        if self.sr > 1:
            fmap = F.from_tokens(tokens, hw)
            context = self.reduce_norm(F.to_tokens(self.reduce(fmap)))
        return self.attn(tokens, context)

    def macs(self, h: int, w: int) -> int:
        lk, red = h * w, 0
        if self.sr > 1:
            red, hr, wr = self.reduce.macs(h, w)
            lk = hr * wr
        return red + self.attn.macs(h * w, lk)


class MixFFN(Module):
    def __init__(self, dim: int, ratio: int, rng):
        super().__init__()
        hidden = dim * ratio
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.dw = Conv2d(hidden, hidden, 3, 1, 1, groups=hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def forward(self, tokens: Tensor, hw: tuple[int, int]) -> Tensor:
        x = self.fc1(tokens)
        x = F.to_tokens(self.dw(F.from_tokens(x, hw)))
        return self.fc2(F.gelu(x))

    def macs(self, h: int, w: int) -> int:
        return self.fc1.macs(h * w) + self.dw.macs(h, w)[0] + self.fc2.macs(h * w)


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, sr: int, ratio: int, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = EfficientAttention(dim, heads, sr, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = MixFFN(dim, ratio, rng)

    def forward(self, tokens: Tensor, hw: tuple[int, int]) -> Tensor:
        tokens = tokens + self.attn(self.norm1(tokens), hw)
        return tokens + self.ffn(self.norm2(tokens), hw)

    def macs(self, h: int, w: int) -> int:
        return self.attn.macs(h, w) + self.ffn.macs(h, w)


class EncoderStage(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, depth: int, heads: int, sr: int,
                 ratio: int, rng):
        super().__init__()
        self.merge = Conv2d(cin, cout, k, stride, k // 2, rng=rng)
        self.merge_norm = LayerNorm(cout)
        self.blocks = [TransformerBlock(cout, heads, sr, ratio, rng) for _ in range(depth)]
        self.norm = LayerNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        fmap = self.merge(x)
        hw = fmap.shape[-2:]
        tokens = self.merge_norm(F.to_tokens(fmap))
        for blk in self.blocks:
            tokens = blk(tokens, hw)
        return F.from_tokens(self.norm(tokens), hw)

    def macs(self, h: int, w: int) -> tuple[int, int, int]:
        total, ho, wo = self.merge.macs(h, w)
        total += sum(b.macs(ho, wo) for b in self.blocks)
        return total, ho, wo


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        cins = [3] + cfg.channels[:-1]
        self.stages = [
            EncoderStage(cins[i], cfg.channels[i], cfg.patch_kernels[i], cfg.patch_strides[i], cfg.depths[i],
                         cfg.heads[i], cfg.sr_ratios[i], cfg.mlp_ratio, rng)
            for i in range(4)
        ]

    def forward(self, image: Tensor) -> list[Tensor]:
        """Return the pyramid ``[F1, F2, F3, F4]`` at strides 4, 8, 16, 32."""
        H, W = image.shape[-2:]
        if H % 32 or W % 32:
            raise ValueError(f"input extents must be divisible by 32, got {H}x{W}")
        feats, x = [], image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def macs(self, h: int, w: int) -> list[int]:
        out = []
        for stage in self.stages:
            m, h, w = stage.macs(h, w)
            out.append(m)
        return out


def encode(image: Tensor, encoder: Encoder) -> list[Tensor]:
    return encoder(image)


def count_stage_params(cfg: EncoderConfig) -> list[int]:
    """Learnable scalar count for each of the four encoder stages."""
    enc = Encoder(cfg)
    return [s.num_parameters() for s in enc.stages]
