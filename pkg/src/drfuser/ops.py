"""Differentiable primitives used by the networks.

Each function computes its forward value with numpy and records a backward
rule on the returned :class:`~drfuser.tensor.Tensor`. Broadcasting is only
allowed where a layer needs it (bias add, per-channel affine, per-site
gating); every other shape mismatch raises :class:`DimensionError`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from drfuser import kernels
from drfuser.errors import ContractError, DegenerateBatchError, DimensionError
from drfuser.tensor import Tensor, as_tensor


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axes differ (a axis 1 = {a.shape[1]}, b axis 0 = {b.shape[0]})")

    def backward(g):
        return kernels.matmul(g, b.data.T), kernels.matmul(a.data.T, g)

    return Tensor.from_op(kernels.matmul(a.data, b.data), (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x[N,in] -> x @ weight.T + bias`` with ``weight[out,in]``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear: expected 2-D input and weight, got ranks {x.ndim} and {weight.ndim}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input axis 1 ({x.shape[1]}) != weight axis 1 ({weight.shape[1]})")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = kernels.matmul(x.data, weight.data.T)
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = kernels.matmul(g, weight.data)
        gw = kernels.matmul(g.T, x.data)
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``x[N,C,H,W] * weight[K,C,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got ranks {x.ndim} and {weight.ndim}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if c != wc:
        raise DimensionError(f"conv2d: input channel axis 1 ({c}) != weight axis 1 ({wc})")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding} (axes 2, 3)")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({k},)")
    ho = kernels.conv_output_size(h, kh, stride, padding)
    wo = kernels.conv_output_size(w, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(k, -1)
    out = kernels.matmul(cols, wmat.T)
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = kernels.matmul(g2.T, cols).reshape(weight.shape)
        gx = kernels.col2im(kernels.matmul(g2, wmat), x.shape, kh, kw, stride, padding)
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(np.ascontiguousarray(out), parents, backward)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate); in eval mode the running estimates are used.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d: expected 4-D input, got rank {x.ndim}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm2d: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},) from axis 1")
    dt = x.dtype.type
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError("batch_norm2d: need N*H*W >= 2 per channel in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
        inv_std = dt(1.0) / np.sqrt(var + dt(eps))
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = g4 * xhat + b4

        def backward(g):
            dxhat = g * g4
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv_std = (dt(1.0) / np.sqrt(running_var + dt(eps))).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1).astype(x.dtype)) * inv_std.reshape(1, c, 1, 1)
        out = g4 * xhat + b4

        def backward(g):
            gx = g * (g4 * inv_std.reshape(1, c, 1, 1))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: expected 4-D input, got rank {x.ndim}")
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise DimensionError(f"max_pool2d: window {kernel} exceeds padded input (axes 2, 3)")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        ki, kj = np.divmod(arg, kernel)
        rows = ki + (np.arange(ho) * stride)[None, None, :, None]
        cols = kj + (np.arange(wo) * stride)[None, None, None, :]
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gp, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), g)
        if padding:
            gp = gp[:, :, padding:padding + h, padding:padding + w]
        return (gp,)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward)


def dropout(x: Tensor, keep_prob: float, seed: int, training: bool = True) -> Tensor:
    """Inverted dropout; identity outside training or when ``keep_prob == 1``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"dropout: keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1; every other axis must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise DimensionError(f"concat_channels: shape {t.shape} incompatible with {ref} outside axis 1")
    sizes = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=1))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def gate(x: Tensor, alpha: Tensor) -> Tensor:
    """Scale ``x[N,C,H,W]`` by a per-site gate ``alpha[N,1,H,W]``."""
    n, c, h, w = x.shape
    if alpha.shape != (n, 1, h, w):
        raise DimensionError(f"gate: alpha shape {alpha.shape} != {(n, 1, h, w)}")

    def backward(g):
        return g * alpha.data, (g * x.data).sum(axis=1, keepdims=True)

    return Tensor.from_op(x.data * alpha.data, (x, alpha), backward)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))
