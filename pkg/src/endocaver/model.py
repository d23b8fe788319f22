"""Dual-decoder network: encoder -> global attention -> deblurring + segmentation decoders."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np

from .decoders import DeblurDecoder, DecoderConfig, SegmentDecoder
from .dsa import Aligner, DsaConfig
from .encoder import Encoder, EncoderConfig
from .gam import GamConfig, GlobalAttentionModule
from .nn import Module
from .tensor import Tensor

# Ablation rows: name -> (gam, dsa, deblur_branch, locos)
VARIANTS = {
    "full": (True, True, True, True),
    "no-locos": (True, True, True, False),
    "no-locos-dsa": (True, False, True, False),
    "no-locos-dsa-gam": (False, False, True, False),
    "no-deblur": (False, False, False, False),
}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gam: GamConfig = field(default_factory=GamConfig)
    dsa: DsaConfig = field(default_factory=DsaConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    deblur_branch: bool = True
    # feed the restored image into the segmentation head (literal reading of the S-decoder inputs)
    seg_uses_restored: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.dsa.enabled and not self.deblur_branch:
            raise ValueError("the aligner needs the deblurring branch (dsa.enabled implies deblur_branch)")
        if self.seg_uses_restored and not self.deblur_branch:
            raise ValueError("seg_uses_restored needs the deblurring branch")
        if any(not 0 <= s <= 3 for s in self.dsa.stages):
            raise ValueError("aligner stages must be in 0..3 (stages with an encoder feature)")

    @classmethod
    def toy(cls, **overrides) -> ModelConfig:
        return cls(**overrides)

    @classmethod
    def paper_scale(cls) -> ModelConfig:
        return cls(encoder=EncoderConfig.paper_scale(), dsa=DsaConfig(stages=[0, 1, 2, 3]))

    def variant(self, name: str) -> ModelConfig:
        """Copy of this config with the ablation toggles of ``name`` applied."""
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        gam, dsa, deblur, _ = VARIANTS[name]
        cfg = copy.deepcopy(self)
        cfg.gam.enabled, cfg.dsa.enabled, cfg.deblur_branch = gam, dsa, deblur
        if not deblur:
            cfg.seg_uses_restored = False
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        return _from_dict(cls, data)


def _from_dict(kind, data):
    if not is_dataclass(kind):
        return data
    known = {f.name: f for f in fields(kind)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _nested_types.get((kind.__name__, name))
        kwargs[name] = _from_dict(sub, value) if sub and isinstance(value, dict) else value
    return kind(**kwargs)


_nested_types = {
    ("ModelConfig", "encoder"): EncoderConfig,
    ("ModelConfig", "gam"): GamConfig,
    ("ModelConfig", "dsa"): DsaConfig,
    ("ModelConfig", "decoder"): DecoderConfig,
}


@dataclass
class ModelOutputs:
    restored: Tensor | None
    mask: Tensor


class EndoCaver(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        enc_ch = cfg.encoder.channels
        self.encoder = Encoder(cfg.encoder, rng)
        self.gam = GlobalAttentionModule(enc_ch, cfg.gam, rng) if cfg.gam.enabled else None
        self.d_decoder = DeblurDecoder(enc_ch, cfg.decoder, rng) if cfg.deblur_branch else None
        self.s_decoder = SegmentDecoder(enc_ch, cfg.decoder, rng, restored_input=cfg.seg_uses_restored)
        self.aligners: list[Aligner] = []
        self.aligner_stages: list[int] = []
        if cfg.dsa.enabled:
            latent = self.d_decoder.latent_channels
            for j in sorted(set(cfg.dsa.stages)):
                seg_in = self.s_decoder.stage_inputs[j]
                seg_out = self.s_decoder.channels[j]
                self.aligners.append(Aligner(seg_in, enc_ch[3 - j], seg_out, latent, cfg.dsa, rng))
                self.aligner_stages.append(j)
        self._latent: Tensor | None = None

    # -- pipeline pieces ---------------------------------------------------
    def enhance(self, pyramid: list[Tensor]) -> list[Tensor]:
        return self.gam(pyramid) if self.gam is not None else pyramid

    def deblur_decode(self, enhanced: list[Tensor]) -> tuple[Tensor, Tensor]:
        if self.d_decoder is None:
            raise RuntimeError("this model was built without the deblurring branch")
        restored, latent = self.d_decoder(enhanced)
        self._latent = latent
        return restored, latent

    def segment_decode(self, enhanced: list[Tensor], pyramid: list[Tensor], latent: Tensor | None = None,
                       restored: Tensor | None = None) -> Tensor:
        if self.aligners:
            if latent is None or latent is not self._latent:
                raise RuntimeError("segment_decode needs the latent feature from deblur_decode of the same pass")
        aligners = dict(zip(self.aligner_stages, self.aligners))
        return self.s_decoder(enhanced, pyramid, aligners, latent, restored)

    def forward(self, image: Tensor) -> ModelOutputs:
        data = image.data
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("input pixels must lie in [0, 1]; divide 8-bit images by 255")
        self._latent = None
        pyramid = self.encoder(image)
        enhanced = self.enhance(pyramid)
        restored = latent = None
        if self.d_decoder is not None:
            restored, latent = self.deblur_decode(enhanced)
        mask = self.segment_decode(enhanced, pyramid, latent, restored)
        self._latent = None
        return ModelOutputs(restored, mask)

    # -- accounting --------------------------------------------------------
    def parameter_breakdown(self) -> dict[str, int]:
        parts = {
            "encoder": self.encoder.num_parameters(),
            "gam": self.gam.num_parameters() if self.gam else 0,
            "d_decoder": self.d_decoder.num_parameters() if self.d_decoder else 0,
            "s_decoder": self.s_decoder.num_parameters(),
            "dsa": sum(a.num_parameters() for a in self.aligners),
        }
        return parts

    def mac_breakdown(self, h: int, w: int) -> dict[str, int]:
        """Closed-form multiply-accumulate counts per component for one ``h x w`` image."""
        res = [(h >> (5 - j), w >> (5 - j)) for j in range(5)]
        return {
            "encoder": sum(self.encoder.macs(h, w)),
            "gam": self.gam.macs(h, w) if self.gam else 0,
            "d_decoder": self.d_decoder.macs(h, w) if self.d_decoder else 0,
            "s_decoder": self.s_decoder.macs(h, w),
            "dsa": sum(a.macs(*res[j]) for j, a in zip(self.aligner_stages, self.aligners)),
        }
