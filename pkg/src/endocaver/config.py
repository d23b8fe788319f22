"""Training configuration and YAML config files with ``model`` / ``train`` sections."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .degrade import SEVERITIES
from .model import ModelConfig, _from_dict


@dataclass
class LocosConfig:
    enabled: bool = True
    w_min: float = 0.2
    direction: str = "as-written"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 4
    input_size: int = 64
    locos: LocosConfig = field(default_factory=LocosConfig)
    seed: int = 0
    train_dir: str | None = None     # None -> bundled corpus
    eval_dir: str | None = None      # None -> train_dir
    degraded: bool = True
    severity: str = "moderate"
    max_images: int | None = None
    checkpoint_every: int = 500
    deblur_warmup_steps: int = 0     # optional restoration-only phase before joint training
    eval_every: int = 0              # 0 disables periodic evaluation / early stopping
    stop_dice: float | None = None
    stop_psnr: float | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError("input_size must be a positive multiple of 32")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be one of {SEVERITIES}")
        if not 0 <= self.deblur_warmup_steps < self.total_steps:
            raise ValueError("deblur_warmup_steps must be below total_steps")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValueError("cadences must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        data = dict(data)
        if isinstance(data.get("locos"), dict):
            data["locos"] = LocosConfig(**data["locos"])
        return cls(**data)


def load_config(path: str | Path | None) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig.toy(), TrainConfig()
    raw = yaml.safe_load(Path(path).read_text()) or {}
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    model = _from_dict(ModelConfig, raw.get("model") or {})
    train = TrainConfig.from_dict(raw.get("train") or {})
    return model, train


def dump_config(model: ModelConfig, train: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump({"model": model.to_dict(), "train": train.to_dict()}, sort_keys=False))
