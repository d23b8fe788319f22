"""Decoder building blocks and the two task decoders.

LiDeconv = transposed-conv recovery (x2) + BN + SiLU, then an inverted
residual bottleneck. LiViT keeps the same recovery stage but swaps the
bottleneck for a MobileViT block.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import functional as F
from .nn import BatchNorm2d, Conv2d, ConvBNAct, ConvTranspose2d, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor, concat


@dataclass
class DecoderConfig:
    min_channels: int = 16
    expansion: int = 4
    patch: int = 2
    vit_depth: int = 2
    vit_head_dim: int = 32
    ffn_ratio: int = 2
    # S-decoder stages (0 = coarsest) that use a MobileViT bottleneck; others use an inverted residual
    vit_stages: list[int] = field(default_factory=lambda: [0, 1, 2, 3])

    def channels(self, enc_channels: list[int]) -> list[int]:
        """Output width of each of the five x2 stages.

        The first three stages land on the resolutions of encoder stages 3, 2, 1
        and take their widths; the two stages beyond keep halving.
        """
        c1 = enc_channels[0]
        widths = [enc_channels[2], enc_channels[1], c1, c1 // 2, c1 // 4]
        return [max(self.min_channels, c) for c in widths]


class InvertedResidual(Module):
    def __init__(self, c: int, ratio: int, rng):
        super().__init__()
        hidden = c * ratio
        self.expand = ConvBNAct(c, hidden, 1, rng=rng)
        self.dw = ConvBNAct(hidden, hidden, 3, groups=hidden, rng=rng)
        self.project = ConvBNAct(hidden, c, 1, act=None, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.project(self.dw(self.expand(x)))

    def macs(self, h: int, w: int) -> int:
        return sum(m.macs(h, w)[0] for m in (self.expand, self.dw, self.project))


class TransformerLayer(Module):
    def __init__(self, dim: int, heads: int, ffn_ratio: int, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * ffn_ratio, rng=rng)
        self.fc2 = Linear(dim * ffn_ratio, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.silu(self.fc1(self.norm2(x))))

    def macs(self, tokens: int) -> int:
        return self.attn.macs(tokens, tokens) + self.fc1.macs(tokens) + self.fc2.macs(tokens)


class MobileViTBlock(Module):
    """Local 3x3 conv, patch-wise global transformer, then fusion with the block input."""

    def __init__(self, c: int, cfg: DecoderConfig, rng):
        super().__init__()
        d = c
        self.patch = cfg.patch
        self.local = ConvBNAct(c, c, 3, rng=rng)
        self.proj_in = Conv2d(c, d, 1, bias=False, rng=rng)
        heads = max(1, d // cfg.vit_head_dim)
        self.layers = [TransformerLayer(d, heads, cfg.ffn_ratio, rng) for _ in range(cfg.vit_depth)]
        self.norm = LayerNorm(d)
        self.proj_out = ConvBNAct(d, c, 1, rng=rng)
        self.fuse = ConvBNAct(2 * c, c, 3, rng=rng)

    def unfold(self, x: Tensor) -> Tensor:
        """``[N, d, H, W]`` -> ``[N*p*p, (H/p)*(W/p), d]``: one sequence per in-patch position."""
        N, d, H, W = x.shape
        p = self.patch
        x = x.reshape(N, d, H // p, p, W // p, p).transpose(0, 3, 5, 2, 4, 1)
        return x.reshape(N * p * p, (H // p) * (W // p), d)

    def fold(self, x: Tensor, shape) -> Tensor:
        N, d, H, W = shape
        p = self.patch
        x = x.reshape(N, p, p, H // p, W // p, d).transpose(0, 5, 3, 1, 4, 2)
        return x.reshape(N, d, H, W)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[-2:]
        if H % self.patch or W % self.patch:
            raise ValueError(f"MobileViT block needs extents divisible by {self.patch}, got {H}x{W}")
        y = self.proj_in(self.local(x))
        shape = y.shape
        t = self.unfold(y)
        for layer in self.layers:
            t = layer(t)
        y = self.proj_out(self.fold(self.norm(t), shape))
        return self.fuse(concat([x, y], axis=1))

    def macs(self, h: int, w: int) -> int:
        p = self.patch
        tokens = (h // p) * (w // p)
        seq = sum(layer.macs(tokens) for layer in self.layers) * p * p
        convs = self.local.macs(h, w)[0] + self.proj_in.macs(h, w)[0] + self.proj_out.macs(h, w)[0]
        return convs + seq + self.fuse.macs(h, w)[0]


class UpBlock(Module):
    """x2 recovery stage followed by a bottleneck (inverted residual or MobileViT)."""

    def __init__(self, cin: int, cout: int, vit: bool, cfg: DecoderConfig, rng):
        super().__init__()
        self.up = ConvTranspose2d(cin, cout, 2, 2, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.bottleneck = MobileViTBlock(cout, cfg, rng) if vit else InvertedResidual(cout, cfg.expansion, rng)

    def recover(self, x: Tensor) -> Tensor:
        return F.silu(self.bn(self.up(x)))

    def forward(self, x: Tensor) -> Tensor:
        return self.bottleneck(self.recover(x))

    def macs(self, h: int, w: int) -> tuple[int, int, int]:
        m, ho, wo = self.up.macs(h, w)
        return m + self.bottleneck.macs(ho, wo), ho, wo


class LiDeconv(UpBlock):
    def __init__(self, cin: int, cout: int, cfg: DecoderConfig, rng):
        super().__init__(cin, cout, False, cfg, rng)


class LiViT(UpBlock):
    def __init__(self, cin: int, cout: int, cfg: DecoderConfig, rng):
        super().__init__(cin, cout, True, cfg, rng)


class DeblurDecoder(Module):
    """Coarse-to-fine LiDeconv stack from the deepest feature to full resolution.

    Skip features at matching resolution (stages 3, 2, 1 of the pyramid) are
    projected to the decoder width and added after each recovery block.
    """

    def __init__(self, enc_channels: list[int], cfg: DecoderConfig, rng):
        super().__init__()
        chans = cfg.channels(enc_channels)
        cins = [enc_channels[-1]] + chans[:-1]
        self.blocks = [LiDeconv(cins[j], chans[j], cfg, rng) for j in range(5)]
        self.skips = [Conv2d(enc_channels[2 - j], chans[j], 1, rng=rng) for j in range(3)]
        self.head = Conv2d(chans[-1], 3, 3, 1, 1, rng=rng)
        self.latent_channels = chans[3]

    def forward(self, feats: list[Tensor]) -> tuple[Tensor, Tensor]:
        x = feats[3]
        latent = None
        for j, block in enumerate(self.blocks):
            if j == 4:
                latent = x
            x = block(x)
            if j < 3:
                x = x + self.skips[j](feats[2 - j])
        return F.sigmoid(self.head(x)), latent

    def macs(self, h: int, w: int) -> int:
        h, w = h // 32, w // 32
        total = 0
        for j, block in enumerate(self.blocks):
            m, h, w = block.macs(h, w)
            total += m
            if j < 3:
                total += self.skips[j].macs(h, w)[0]
        return total + self.head.macs(h, w)[0]


class SegmentDecoder(Module):
    """Coarse-to-fine stack with MobileViT bottlenecks and a 1-channel sigmoid head.

    Cross-task aligners (when supplied) wrap the stages they are registered for.
    """

    def __init__(self, enc_channels: list[int], cfg: DecoderConfig, rng, restored_input: bool = False):
        super().__init__()
        chans = cfg.channels(enc_channels)
        cins = [enc_channels[-1]] + chans[:-1]
        self.channels = chans
        self.stage_inputs = cins
        self.blocks = [UpBlock(cins[j], chans[j], j in cfg.vit_stages, cfg, rng) for j in range(5)]
        self.skips = [Conv2d(enc_channels[2 - j], chans[j], 1, rng=rng) for j in range(3)]
        self.restored_input = restored_input
        self.head = Conv2d(chans[-1] + (3 if restored_input else 0), 1, 3, 1, 1, rng=rng)

    def forward(self, enhanced: list[Tensor], pyramid: list[Tensor], aligners: dict | None = None,
                latent: Tensor | None = None, restored: Tensor | None = None) -> Tensor:
        aligners = aligners or {}
        x = enhanced[3]
        for j, block in enumerate(self.blocks):
            skip = self.skips[j](pyramid[2 - j]) if j < 3 else None
            if j in aligners:
                x = aligners[j](x, enhanced[3 - j], block, skip, latent)
            else:
                x = block(x)
                if skip is not None:
                    x = x + skip
        if self.restored_input:
            if restored is None:
                raise ValueError("segment decoder configured to consume the restored image but none was given")
            x = concat([x, restored], axis=1)
        return F.sigmoid(self.head(x))

    def macs(self, h: int, w: int) -> int:
        h, w = h // 32, w // 32
        total = 0
        for j, block in enumerate(self.blocks):
            m, h, w = block.macs(h, w)
            total += m
            if j < 3:
                total += self.skips[j].macs(h, w)[0]
        return total + self.head.macs(h, w)[0]


def stage_resolutions(h: int, w: int) -> list[tuple[int, int]]:
    """Input resolution of each decoder stage (stage 0 starts at 1/32)."""
    return [(h >> (5 - j), w >> (5 - j)) for j in range(5)]

