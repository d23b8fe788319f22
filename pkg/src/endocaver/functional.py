"""Differentiable image and sequence operators used by the network.

Tensors are channels-first (``[N, C, H, W]``) for convolutional ops and
``[..., L, D]`` token-last for sequence ops.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf
from scipy.special import expit as _sigmoid

from .tensor import Tensor, _make, as_tensor, matmul, record_macs

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# -- convolution ---------------------------------------------------------------
def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap(k: int, s: int, n_out: int, i: int) -> slice:
    return slice(i, i + s * (n_out - 1) + 1, s)


def _dense_conv(xp, w, stride, Ho, Wo):
    """Cross-correlation of padded input with a dense kernel; returns output and a grad closure."""
    N, C, Hp, Wp = xp.shape
    O, _, k, _ = w.shape
    wm = w.reshape(O, C * k * k)
    if k == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo].transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    # one GEMM per sample keeps each sample's result independent of the batch size
    out = (cols.reshape(N, Ho * Wo, -1) @ wm.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def grads(g, need_x, need_w):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(w.shape) if need_w else None
        gx = None
        if need_x:
            dcols = (gm @ wm).reshape(N, Ho, Wo, C, k, k)
            gx = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gx[:, :, _tap(k, stride, Ho, i), _tap(k, stride, Wo, j)] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gw

    return out, grads


def _depthwise_conv(xp, w, stride, Ho, Wo):
    k = w.shape[-1]
    wk = w[:, 0]
    out = np.zeros((xp.shape[0], xp.shape[1], Ho, Wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, _tap(k, stride, Ho, i), _tap(k, stride, Wo, j)] * wk[None, :, i, j, None, None]

    def grads(g, need_x, need_w):
        gx = np.zeros_like(xp) if need_x else None
        gw = np.zeros_like(w) if need_w else None
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), _tap(k, stride, Ho, i), _tap(k, stride, Wo, j))
                if need_w:
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                if need_x:
                    gx[sl] += g * wk[None, :, i, j, None, None]
        return gx, gw

    return out, grads


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation, ``weight`` shaped ``[Cout, Cin/groups, k, k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    N, C, H, W = x.shape
    O, Cg, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if C != Cg * groups or O % groups:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cg}x{groups} "
                         f"(weight shape {weight.shape})")
    if stride < 1 or k < 1:
        raise ShapeError("conv2d: stride and kernel size must be >= 1")
    if H + 2 * padding < k or W + 2 * padding < k:
        raise ShapeError(f"conv2d: padded input {H + 2 * padding}x{W + 2 * padding} smaller than kernel {k}")
    Ho, Wo = _out_size(H, k, stride, padding), _out_size(W, k, stride, padding)
    xp = _pad(x.data, padding)
    wd = weight.data
    record_macs(N * O * Cg * k * k * Ho * Wo)

    if groups == 1:
        out, grads = _dense_conv(xp, wd, stride, Ho, Wo)
    elif groups == C and Cg == 1 and O == C:
        out, grads = _depthwise_conv(xp, wd, stride, Ho, Wo)
    else:
        og = O // groups
        parts = [_dense_conv(xp[:, g * Cg:(g + 1) * Cg], wd[g * og:(g + 1) * og], stride, Ho, Wo)
                 for g in range(groups)]
        out = np.concatenate([p[0] for p in parts], axis=1)

        def grads(g, need_x, need_w):
            res = [p[1](g[:, i * og:(i + 1) * og], need_x, need_w) for i, p in enumerate(parts)]
            gx = np.concatenate([r[0] for r in res], axis=1) if need_x else None
            gw = np.concatenate([r[1] for r in res], axis=0) if need_w else None
            return gx, gw

    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gxp, gw = grads(g, x.requires_grad, weight.requires_grad)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution, ``weight`` shaped ``[Cin, Cout, k, k]``.

    Output extent is ``(H - 1) * stride - 2 * padding + k``; this is the adjoint
    of :func:`conv2d` with the same kernel, stride and padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    N, C, H, W = x.shape
    Ci, O, k, _ = weight.shape
    if C != Ci:
        raise ShapeError(f"conv_transpose2d: input has {C} channels, weight expects {Ci}")
    if stride < 1:
        raise ShapeError("conv_transpose2d: stride must be >= 1")
    Hf, Wf = (H - 1) * stride + k, (W - 1) * stride + k
    Ho, Wo = Hf - 2 * padding, Wf - 2 * padding
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv_transpose2d: padding too large for output")
    wd = weight.data
    wm = wd.reshape(C, O * k * k)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    record_macs(N * H * W * C * O * k * k)
    cols = (xm @ wm).reshape(N, H, W, O, k, k)
    full = np.zeros((N, O, Hf, Wf), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, _tap(k, stride, H, i), _tap(k, stride, W, j)] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + Ho, padding:padding + Wo]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gf = _pad(g, padding)
        dcols = np.empty((N, H, W, O, k, k), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dcols[:, :, :, :, i, j] = gf[:, :, _tap(k, stride, H, i), _tap(k, stride, W, j)].transpose(0, 2, 3, 1)
        dm = dcols.reshape(-1, O * k * k)
        gx = (dm @ wm.T).reshape(N, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ dm).reshape(wd.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv_transpose2d")


# -- normalization -----------------------------------------------------------------
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization of ``[N, C, H, W]``.

    In training mode batch statistics are used and the running buffers are
    updated in place (EMA with ``momentum``; unbiased variance for the buffer).
    """
    x = as_tensor(x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: affine params must have length {C}")
    xd = x.data
    gd = gamma.data.reshape(1, C, 1, 1)
    if training:
        m = xd.size // C
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.ravel() * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.ravel()
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, C, 1, 1).astype(xd.dtype)
        xhat = (xd - running_mean.reshape(1, C, 1, 1).astype(xd.dtype)) * inv
    out = xhat * gd + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis."""
    x = as_tensor(x)
    xd = x.data
    D = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv / D * (D * dxhat - dxhat.sum(-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "layer_norm")


# -- activations -------------------------------------------------------------------
def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _make(xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),), "silu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = (0.5 * (1.0 + erf(xd / _SQRT2))).astype(xd.dtype)
    pdf = (_INV_SQRT_2PI * np.exp(-0.5 * xd * xd)).astype(xd.dtype)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


_ACTIVATIONS = {"silu": silu, "gelu": gelu, "sigmoid": sigmoid, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


# -- resampling ------------------------------------------------------------------
def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres (align_corners=False), source coordinate clamped at 0
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - lam)
    np.add.at(m, (np.arange(n_out), i1), lam)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resampling of ``[N, C, H, W]`` to ``size`` with half-pixel centres.

    Resizing to the source size returns the input unchanged.
    """
    x = as_tensor(x)
    H, W = x.shape[-2:]
    Ht, Wt = int(size[0]), int(size[1])
    if Ht < 1 or Wt < 1:
        raise ShapeError("bilinear_resize: target extents must be >= 1")
    if (Ht, Wt) == (H, W):
        return x
    rh = _interp_matrix(H, Ht, x.dtype)
    rw = _interp_matrix(W, Wt, x.dtype)
    out = rh @ x.data @ rw.T

    def backward(g):
        return (rh.T @ g @ rw,)

    return _make(out, (x,), backward, "bilinear_resize")


# -- attention ------------------------------------------------------------------------
def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the trailing two axes."""
    d = q.shape[-1]
    logits = matmul(q, k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = softmax(logits * (1.0 / np.sqrt(d)), axis=-1)
    return matmul(weights, v)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[B, L, D]`` -> ``[B, heads, L, D / heads]``."""
    B, L, D = x.shape
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def to_tokens(x: Tensor) -> Tensor:
    """``[N, C, H, W]`` -> ``[N, H*W, C]``."""
    N, C, H, W = x.shape
    return x.reshape(N, C, H * W).transpose(0, 2, 1)


def from_tokens(x: Tensor, hw: tuple[int, int]) -> Tensor:
    N, L, C = x.shape
    return x.transpose(0, 2, 1).reshape(N, C, hw[0], hw[1])
