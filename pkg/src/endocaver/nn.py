"""Module containers and parameterised layers."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype, matmul


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or default_dtype()), requires_grad=True)


class Module:
    """Minimal module tree: parameters, buffers and children are discovered by attribute."""

    def __init__(self) -> None:
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal --------------------------------------------------------
    def _children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> Module:
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def astype(self, dtype) -> Module:
        """Cast every parameter and buffer in place (e.g. float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        owners = {}
        for prefix, m in self.named_modules():
            for name in getattr(m, "_buffers", ()):
                owners[f"{prefix}.{name}" if prefix else name] = (m, name)
        expected = set(params) | set(owners)
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
                p.data = np.array(value, dtype=p.dtype)
            else:
                m, attr = owners[name]
                setattr(m, attr, np.array(value, dtype=getattr(m, attr).dtype))


# -- initialisation ------------------------------------------------------------
def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def fan_out_normal(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    k = shape[2] * shape[3]
    fan_out = k * shape[0] // groups
    return rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape)


# -- layers ----------------------------------------------------------------------
class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 1, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding, self.groups = stride, padding, groups
        self.in_channels, self.out_channels, self.kernel_size = cin, cout, k
        self.weight = Parameter(fan_out_normal(rng, (cout, cin // groups, k, k), groups))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def macs(self, h: int, w: int) -> tuple[int, int, int]:
        """MACs for one image of spatial ``h x w``; also returns the output extent."""
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        return self.out_channels * (self.in_channels // self.groups) * k * k * ho * wo, ho, wo


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 2, stride: int = 2, padding: int = 0,
                 bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.in_channels, self.out_channels, self.kernel_size = cin, cout, k
        self.weight = Parameter(fan_out_normal(rng, (cin, cout, k, k)))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def macs(self, h: int, w: int) -> tuple[int, int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.in_channels * self.out_channels * k * k * h * w,
                (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as ``[in, out]``."""

    def __init__(self, din: int, dout: int, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = din, dout
        self.weight = Parameter(trunc_normal(rng, (din, dout)))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def macs(self, tokens: int) -> int:
        return tokens * self.in_features * self.out_features


class ConvBNAct(Module):
    def __init__(self, cin: int, cout: int, k: int = 1, stride: int = 1, groups: int = 1,
                 act: str | None = "silu", rng: np.random.Generator | None = None):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride, k // 2, groups, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return F.activation(y, self.act) if self.act else y

    def macs(self, h: int, w: int) -> tuple[int, int, int]:
        return self.conv.macs(h, w)


class MultiHeadAttention(Module):
    """Multi-head attention with learned projections.

    Queries come from ``x``; keys and values come from ``context`` (``x`` itself
    when omitted), so the same module serves self- and cross-attention.
    """

    def __init__(self, dim: int, heads: int, context_dim: int | None = None, out_dim: int | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"attention width {dim} is not divisible by {heads} heads")
        context_dim = context_dim or dim
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng=rng)
        self.k = Linear(context_dim, dim, rng=rng)
        self.v = Linear(context_dim, dim, rng=rng)
        self.proj = Linear(dim, out_dim or dim, rng=rng)

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        if context.shape[1] == 0:
            raise ValueError("attention context is empty")
        q = F.split_heads(self.q(x), self.heads)
        k = F.split_heads(self.k(context), self.heads)
        v = F.split_heads(self.v(context), self.heads)
        return self.proj(F.merge_heads(F.scaled_dot_product_attention(q, k, v)))

    def macs(self, lq: int, lk: int) -> int:
        proj = self.q.macs(lq) + self.k.macs(lk) + self.v.macs(lk) + self.proj.macs(lq)
        return proj + 2 * lq * lk * self.dim


def identity_linear(layer: Linear) -> None:
    """Set a square linear layer to the identity map (used in tests and ablations)."""
    layer.weight.data = np.eye(layer.in_features, layer.out_features, dtype=layer.weight.dtype)
    if layer.bias is not None:
        layer.bias.data = np.zeros_like(layer.bias.data)

