"""Joint deblurring/segmentation objective with a cosine-annealed task weight."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)

DICE_SMOOTH = 1.0
FIXED_WEIGHT = 0.5


@dataclass
class LocosSchedule:
    """Segmentation weight ``w_min + (1 - w_min) * (1 + cos(pi t / T)) / 2``.

    ``direction="inverted"`` mirrors it so the weight climbs from ``w_min`` to 1.
    """

    w_min: float = 0.2
    total_steps: int = 2000
    direction: str = "as-written"
    clamped: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.w_min < 1.0:
            raise ValueError("w_min must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.direction not in ("as-written", "inverted"):
            raise ValueError("direction must be 'as-written' or 'inverted'")


def w_seg(t: float, sched: LocosSchedule) -> float:
    if t < 0:
        raise ValueError("step must be non-negative")
    if t > sched.total_steps:
        sched.clamped += 1
        log.debug("LoCoS step %s beyond T=%s, clamped", t, sched.total_steps)
        t = sched.total_steps
    w = sched.w_min + 0.5 * (1.0 - sched.w_min) * (1.0 + math.cos(math.pi * t / sched.total_steps))
    if sched.direction == "inverted":
        w = 1.0 + sched.w_min - w
    return w


def dice_loss(pred: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2 sum(p m) + s) / (sum p + sum m + s)`` per image, averaged over the batch."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"dice_loss shape mismatch: {pred.shape} vs {target.shape}")
    axes = tuple(range(1, pred.ndim)) if pred.ndim > 1 else None
    inter = (pred * target).sum(axis=axes)
    denom = pred.sum(axis=axes) + target.sum(axis=axes)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - dice.mean()


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


@dataclass
class LossReport:
    total: Tensor
    deb: float
    seg: float
    weight: float


def combine(l_deb: Tensor | None, l_seg: Tensor, weight: float) -> Tensor:
    if l_deb is None:
        return l_seg
    return l_deb * (1.0 - weight) + l_seg * weight


def total_loss(outputs, target_image, target_mask, t: int, sched: LocosSchedule | None,
               smooth: float = DICE_SMOOTH) -> LossReport:
    """Weighted sum of restoration MSE and segmentation Dice loss.

    ``sched=None`` disables annealing and uses the fixed equal weight. Without a
    restoration output the loss is the segmentation term alone.
    """
    weight = FIXED_WEIGHT if sched is None else w_seg(t, sched)
    l_seg = dice_loss(outputs.mask, target_mask, smooth)
    l_deb = mse_loss(outputs.restored, target_image) if outputs.restored is not None else None
    total = combine(l_deb, l_seg, weight)
    return LossReport(total, float(l_deb.item()) if l_deb is not None else 0.0, float(l_seg.item()), weight)
