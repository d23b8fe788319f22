"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

STEP = 1e-3


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def directional_errors(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], trials: int,
                       rng: np.random.Generator, step: float = STEP) -> list[float]:
    """Compare ``<grad, v>`` against ``(L(x + h v) - L(x - h v)) / 2h`` for random unit directions ``v``.

    ``loss_fn`` must recompute the loss from the current ``.data`` of ``leaves``.
    Leaves are restored afterwards. Intended for float64 tensors.
    """
    for t in leaves:
        t.grad = None
    loss_fn().backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]
    base = [t.data.copy() for t in leaves]
    errors = []
    try:
        for _ in range(trials):
            dirs = [rng.standard_normal(t.shape) for t in leaves]
            norm = np.sqrt(sum(np.sum(d * d) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = float(sum(np.sum(g * d) for g, d in zip(grads, dirs)))
            for t, b, d in zip(leaves, base, dirs):
                t.data = b + step * d
            up = loss_fn().item()
            for t, b, d in zip(leaves, base, dirs):
                t.data = b - step * d
            down = loss_fn().item()
            for t, b in zip(leaves, base):
                t.data = b.copy()
            errors.append(relative_error(analytic, (up - down) / (2 * step)))
    finally:
        for t, b in zip(leaves, base):
            t.data = b
    return errors


def elementwise_errors(loss_fn: Callable[[], Tensor], leaf: Tensor, step: float = STEP,
                       floor: float = 1e-6) -> np.ndarray:
    """Per-element relative error of ``d loss / d leaf`` (small leaves only)."""
    leaf.grad = None
    loss_fn().backward()
    analytic = leaf.grad.copy()
    base = leaf.data.copy()
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        pert = base.copy().reshape(-1)
        pert[i] += step
        leaf.data = pert.reshape(base.shape)
        up = loss_fn().item()
        pert[i] -= 2 * step
        leaf.data = pert.reshape(base.shape)
        down = loss_fn().item()
        flat[i] = (up - down) / (2 * step)
    leaf.data = base
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
