"""Segmentation and restoration quality metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def seg_metrics(pred, target, threshold: float = 0.5) -> tuple[float, float, float]:
    """Dice, IoU and recall of ``pred >= threshold`` against a binary mask.

    Empty target: an empty prediction scores (1, 1, 1); a non-empty one scores
    dice = iou = 0 with recall 1.
    """
    p, m = _array(pred), _array(target)
    if p.shape != m.shape:
        raise ValueError(f"prediction {p.shape} and mask {m.shape} differ in shape")
    pb = p >= threshold
    mb = m >= 0.5
    tp = int(np.count_nonzero(pb & mb))
    fp = int(np.count_nonzero(pb & ~mb))
    fn = int(np.count_nonzero(~pb & mb))
    if tp + fn == 0:
        return (1.0, 1.0, 1.0) if fp == 0 else (0.0, 0.0, 1.0)
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn), tp / (tp + fn)


def psnr(restored, reference, peak: float = 1.0) -> float:
    a, b = _array(restored), _array(reference)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter over the last two axes, valid windows only."""
    k = len(g)
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim(restored, reference, peak: float = 1.0) -> float:
    """Mean structural similarity over all valid 11x11 Gaussian windows and channels.

    Accepts ``[H, W]``, ``[C, H, W]`` or ``[N, C, H, W]`` arrays.
    """
    a, b = _array(restored), _array(reference)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2]}x{a.shape[-1]} is smaller than the {SSIM_WINDOW}px window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricRow:
    filename: str
    dice: float | None = None
    iou: float | None = None
    recall: float | None = None
    psnr: float | None = None
    ssim: float | None = None


COLUMNS = ("dice", "iou", "recall", "psnr", "ssim")


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def mean(self) -> MetricRow:
        out = MetricRow("MEAN")
        for col in COLUMNS:
            vals = [getattr(r, col) for r in self.rows if getattr(r, col) is not None]
            if vals:
                setattr(out, col, float(np.mean(vals)))
        return out

    def write_csv(self, path: Path) -> None:
        present = [c for c in COLUMNS if any(getattr(r, c) is not None for r in self.rows)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["filename", *present])
            for row in [*self.rows, self.mean()]:
                writer.writerow([row.filename, *(f"{getattr(row, c):.6f}" for c in present)])
