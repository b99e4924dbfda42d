"""Differentiable operators for residual CNNs.

All functions take and return :class:`~reenact.tensor.Tensor`. Shapes follow
the NCHW convention. Broadcasting is limited to bias-add and per-channel
affine terms; anything else needs an explicit reshape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_CLAMP = 1e-12


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op} expects a 4-d NCHW tensor, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    a, b, h, w = x.shape
    out = np.zeros((a, b, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    layout: str = "NCHW",
) -> Tensor:
    """2-d cross-correlation via im2col and a single matrix product.

    ``layout="CNHW"`` takes and returns channel-major activations, which lets
    the im2col gather run as ``kh*kw`` slice copies with no output transpose.
    The backbone uses it internally; the default is the usual NCHW.
    """
    _check_4d(x, "conv2d")
    if layout == "NCHW":
        n, c, h, w = x.shape
        xc = x.data.transpose(1, 0, 2, 3)
    elif layout == "CNHW":
        c, n, h, w = x.shape
        xc = x.data
    else:
        raise ValueError(f"unknown layout {layout!r}")
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cw}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({f},)")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = _pad_hw(xc, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    dt = x.data.dtype
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = np.ascontiguousarray(xc).reshape(c, n * h * w)
    else:
        cols6 = np.empty((c, kh, kw, n, ho, wo), dtype=dt)
        for i in range(kh):
            for j in range(kw):
                cols6[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols6.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(f, n, ho, wo)
    if layout == "NCHW":
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    need_dx = x.requires_grad

    def backward(g: np.ndarray):
        g2 = (g.transpose(1, 0, 2, 3) if layout == "NCHW" else g).reshape(f, n * ho * wo)
        dw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        dx = None
        if need_dx:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            if kh == 1 and kw == 1 and stride == 1 and padding == 0:
                dxp = dcols.reshape(c, n, h, w)
            else:
                dxp = np.zeros((c, n, hp, wp), dtype=dt)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
                if padding:
                    dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            dx = np.ascontiguousarray(dxp.transpose(1, 0, 2, 3) if layout == "NCHW" else dxp)
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    layout: str = "NCHW",
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In eval mode the running statistics are used and nothing is
    mutated.
    """
    _check_4d(x, "batch_norm2d")
    if layout == "NCHW":
        axis, axes = 1, (0, 2, 3)
    elif layout == "CNHW":
        axis, axes = 0, (1, 2, 3)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    c = x.shape[axis]
    for name, t in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ValueError(f"batch_norm2d: {name} has shape {t.shape}, expected ({c},)")
    bshape = [1, 1, 1, 1]
    bshape[axis] = c
    xd = x.data
    dt = xd.dtype
    g4 = gamma.data.reshape(bshape)
    b4 = beta.data.reshape(bshape)

    if training:
        m = xd.size // c
        mean = xd.mean(axis=axes)
        centered = xd - mean.reshape(bshape)
        var = np.mean(centered * centered, axis=axes)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dt, copy=False).reshape(bshape)
        xhat = centered * inv_std
        out = xhat * g4 + b4
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g: np.ndarray):
            dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            dbeta = g.sum(axis=axes) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = g * g4
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(dt, copy=False).reshape(bshape)
        xhat = (xd - running_mean.astype(dt, copy=False).reshape(bshape)) * inv_std
        out = xhat * g4 + b4
        scale = g4 * inv_std

        def backward(g: np.ndarray):
            dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            dbeta = g.sum(axis=axes) if beta.requires_grad else None
            dx = g * scale if x.requires_grad else None
            return dx, dgamma, dbeta

    return make_result(out.astype(dt, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def max_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    _check_4d(x, "max_pool2d")
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ValueError(f"max_pool2d: spatial size {h}x{w} smaller than kernel {kernel}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        dx = np.zeros_like(x.data)
        for i in range(kernel):
            for j in range(kernel):
                hit = idx == i * kernel + j
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
        return (dx,)

    return make_result(out, (x,), backward)


def global_avg_pool(x: Tensor, layout: str = "NCHW") -> Tensor:
    """Spatial mean, returning [N, C] for either layout."""
    _check_4d(x, "global_avg_pool")
    a, b, h, w = x.shape
    scale = 1.0 / (h * w)
    pooled = x.data.mean(axis=(2, 3))
    if layout == "CNHW":
        pooled = np.ascontiguousarray(pooled.T)
    elif layout != "NCHW":
        raise ValueError(f"unknown layout {layout!r}")

    def backward(g: np.ndarray):
        gg = g.T if layout == "CNHW" else g
        return (np.broadcast_to((gg * scale)[:, :, None, None], (a, b, h, w)).copy(),)

    return make_result(pooled, (x,), backward)


def transpose01(x: Tensor) -> Tensor:
    """Swap the first two axes (NCHW <-> CNHW)."""
    out = np.ascontiguousarray(x.data.swapaxes(0, 1))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g.swapaxes(0, 1)),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [N, D] and ``weight`` [K, D]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def backward(g: np.ndarray):
        dx = g @ weight.data if x.requires_grad else None
        dw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, (g.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    s = _softmax_np(x.data)

    def backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result(s, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g: np.ndarray):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray, clamp: float = PROB_CLAMP) -> Tensor:
    """Mean of ``-log(max(softmax(logits)[y], clamp))`` over the batch."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects [N, K] logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if y.shape[0] != n:
        raise ValueError(f"cross_entropy: {n} logits rows but {y.shape[0]} labels")
    if np.any((y < 0) | (y >= k)):
        raise ValueError("cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    logp = z[np.arange(n), y] - lse
    floor = np.log(clamp)
    active = logp > floor
    per_sample = -np.where(active, logp, floor)
    dt = logits.data.dtype
    out = np.asarray(per_sample.mean(), dtype=dt)

    def backward(g: np.ndarray):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        p *= (active / n)[:, None]
        return ((p * g).astype(dt, copy=False),)

    return make_result(out, (logits,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make_result(out, tuple(tensors), backward)


def select(x: Tensor, index: int, axis: int = 1) -> Tensor:
    """Pick one slice along ``axis`` (the axis is removed)."""
    out = np.take(x.data, index, axis=axis)

    def backward(g: np.ndarray):
        dx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        dx[tuple(sl)] = g
        return (dx,)

    return make_result(np.ascontiguousarray(out), (x,), backward)
