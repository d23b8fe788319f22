"""File-only figures (Agg backend): loss curves, per-image metrics, ablation bars."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {"figure.dpi": 110, "font.size": 9, "axes.spines.top": False, "axes.spines.right": False,
      "axes.grid": True, "grid.alpha": 0.3}


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss(history, path) -> Path:
    steps = [h.step for h in history]
    with plt.rc_context(RC):
        fig, (ax, ax_w) = plt.subplots(1, 2, figsize=(8, 3))
        ax.semilogy(steps, [h.total for h in history], label="total")
        ax.semilogy(steps, [max(h.deb, 1e-12) for h in history], label="restoration (MSE)", alpha=0.7)
        ax.semilogy(steps, [max(h.seg, 1e-12) for h in history], label="segmentation (Dice)", alpha=0.7)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        ax_w.plot(steps, [h.w_seg for h in history], label="w_seg")
        ax_w.plot(steps, [h.lr / max(max(x.lr for x in history), 1e-30) for h in history], label="lr / peak")
        ax_w.set_xlabel("step")
        ax_w.set_ylim(-0.05, 1.05)
        ax_w.legend(frameon=False)
        return _finish(fig, path)


def plot_metrics(report, path) -> Path:
    rows = report.rows
    cols = [c for c in ("dice", "iou", "recall", "ssim") if any(getattr(r, c) is not None for r in rows)]
    has_psnr = any(r.psnr is not None for r in rows)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2 if has_psnr else 1, figsize=(8 if has_psnr else 5, 3), squeeze=False)
        ax = axes[0, 0]
        for c in cols:
            ax.plot(range(len(rows)), [getattr(r, c) for r in rows], marker="o", ms=3, label=c)
        ax.set_xlabel("image index")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        if has_psnr:
            axes[0, 1].bar(range(len(rows)), [r.psnr for r in rows], color="tab:gray")
            axes[0, 1].set_xlabel("image index")
            axes[0, 1].set_ylabel("PSNR (dB)")
        return _finish(fig, path)


def plot_ablation(rows, path) -> Path:
    names = [r.variant for r in rows]
    with plt.rc_context(RC):
        fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3))
        a.bar(names, [r.dice for r in rows], color="tab:blue")
        a.set_ylabel("Dice")
        a.set_ylim(0, 1)
        b.bar(names, [r.gmacs for r in rows], color="tab:orange")
        b.set_ylabel("GMac")
        for ax in (a, b):
            ax.tick_params(axis="x", rotation=30)
        return _finish(fig, path)
