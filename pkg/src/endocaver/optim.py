"""Adam and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np

from .nn import Parameter


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear ramp 0 -> ``peak`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if not 0 <= warmup < total:
        raise ValueError("need 0 <= warmup < total")
    if step < warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    phase = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * phase))


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        if len(state["m"]) != len(self.params) or len(state["v"]) != len(self.params):
            raise ValueError("optimizer state does not match the parameter list")
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=p.dtype).reshape(p.shape) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.dtype).reshape(p.shape) for a, p in zip(state["v"], self.params)]
