"""Fusion layers: local windowed self-attention, plain addition, additive gate."""

from __future__ import annotations

import numpy as np

from drfuser import ops
from drfuser.errors import ConfigError, DimensionError
from drfuser.nn import Module, he_normal, parameter
from drfuser.tensor import Tensor


def _window_offsets(window: int):
    r = window // 2
    return [(a, b) for a in range(-r, r + 1) for b in range(-r, r + 1)]


def _unfold(x: np.ndarray, window: int) -> np.ndarray:
    """``x[..., H, W] -> [window**2, ..., H, W]``; out-of-image slots are 0."""
    r = window // 2
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, pad)
    return np.stack([xp[..., r + a:r + a + h, r + b:r + b + w] for a, b in _window_offsets(window)])


def _fold(cols: np.ndarray, window: int) -> np.ndarray:
    """Adjoint of :func:`_unfold`."""
    r = window // 2
    h, w = cols.shape[-2:]
    out = np.zeros(cols.shape[1:-2] + (h + 2 * r, w + 2 * r), dtype=cols.dtype)
    for o, (a, b) in enumerate(_window_offsets(window)):
        out[..., r + a:r + a + h, r + b:r + b + w] += cols[o]
    return out[..., r:r + h, r:r + w]


def window_mask(h: int, w: int, window: int) -> np.ndarray:
    """``[window**2, H, W]`` boolean, True where the neighbour is inside the image."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(0 <= ii + a) & (ii + a < h) & (0 <= jj + b) & (jj + b < w)
                     for a, b in _window_offsets(window)])


def local_attention_core(q: Tensor, k: Tensor, v: Tensor, e_row: Tensor, e_col: Tensor, window: int,
                         return_weights: bool = False):
    """Windowed attention on per-head maps ``[N, M, d, H, W]``.

    The logit of query (i, j) for key (i+a, j+b) is ``q.k`` plus the first
    half of ``q`` dotted with ``e_row[a]`` and the second half dotted with
    ``e_col[b]``. Keys outside the image are masked out of the softmax.
    Offsets that cannot land inside the map are skipped outright, which
    gives the same result as masking them.
    """
    n, m, d, h, w = q.shape
    half = d // 2
    r = window // 2
    r_eff = min(r, max(h, w) - 1)
    win = 2 * r_eff + 1
    rows = slice(r - r_eff, r + r_eff + 1)
    er, ec = e_row.data[rows], e_col.data[rows]
    kk = win * win
    mask = window_mask(h, w, win)[:, None, None]
    kw = _unfold(k.data, win)
    vw = _unfold(v.data, win)
    q_row, q_col = q.data[:, :, :half], q.data[:, :, half:]
    row = np.einsum("nmdhw,ad->anmhw", q_row, er)
    col = np.einsum("nmdhw,bd->bnmhw", q_col, ec)
    pos = (row[:, None] + col[None, :]).reshape((kk, n, m, h, w))
    logits = np.einsum("nmdhw,onmdhw->onmhw", q.data, kw) + pos
    logits = np.where(mask, logits, -np.inf)
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    weights = e / e.sum(axis=0, keepdims=True)
    out = np.einsum("onmhw,onmdhw->nmdhw", weights, vw)

    def backward(g):
        dvw = weights[:, :, :, None] * g[None]
        dwts = np.einsum("nmdhw,onmdhw->onmhw", g, vw)
        dlog = weights * (dwts - (weights * dwts).sum(axis=0, keepdims=True))
        dq = np.einsum("onmhw,onmdhw->nmdhw", dlog, kw)
        dkw = dlog[:, :, :, None] * q.data[None]
        grid = dlog.reshape((win, win, n, m, h, w))
        drow, dcol = grid.sum(axis=1), grid.sum(axis=0)
        dq[:, :, :half] += np.einsum("anmhw,ad->nmdhw", drow, er)
        dq[:, :, half:] += np.einsum("bnmhw,bd->nmdhw", dcol, ec)
        de_row = np.zeros_like(e_row.data)
        de_col = np.zeros_like(e_col.data)
        de_row[rows] = np.einsum("anmhw,nmdhw->ad", drow, q_row)
        de_col[rows] = np.einsum("bnmhw,nmdhw->bd", dcol, q_col)
        return dq, _fold(dkw, win), _fold(dvw, win), de_row, de_col

    result = Tensor.from_op(out.astype(q.dtype, copy=False), (q, k, v, e_row, e_col), backward)
    if return_weights:
        return result, np.moveaxis(weights, 0, -1)
    return result


class LocalSelfAttention(Module):
    """Multi-head self-attention over a ``window`` x ``window`` neighbourhood.

    Projections are bias-free 1x1 convolutions; the relative-position
    tables hold one vector per row offset and per column offset, each half
    the per-head width, shared across heads.
    """

    def __init__(self, rng, c_in: int, c_out: int, heads: int = 4, window: int = 7):
        if window < 1 or window % 2 == 0:
            raise ConfigError("window", f"must be a positive odd integer, got {window}")
        if heads < 1 or c_out % heads:
            raise ConfigError("heads", f"{c_out} output channels not divisible by {heads} heads")
        if (c_out // heads) % 2:
            raise ConfigError("heads", f"per-head width {c_out // heads} must be even to split row/col halves")
        self.W_Q = he_normal(rng, (c_out, c_in, 1, 1), c_in)
        self.W_K = he_normal(rng, (c_out, c_in, 1, 1), c_in)
        self.W_V = he_normal(rng, (c_out, c_in, 1, 1), c_in)
        half = c_out // heads // 2
        self.e_row = parameter(rng.uniform(-0.1, 0.1, (window, half)))
        self.e_col = parameter(rng.uniform(-0.1, 0.1, (window, half)))
        self.heads, self.window, self.c_in, self.c_out = heads, window, c_in, c_out

    def forward(self, x: Tensor, return_weights: bool = False):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise DimensionError(f"local_self_attention: input axis 1 has {x.shape[1] if x.ndim == 4 else '?'} "
                                 f"channels, expected {self.c_in}")
        n, _, h, w = x.shape
        split = (n, self.heads, self.c_out // self.heads, h, w)
        q = ops.conv2d(x, self.W_Q).reshape(split)
        k = ops.conv2d(x, self.W_K).reshape(split)
        v = ops.conv2d(x, self.W_V).reshape(split)
        out = local_attention_core(q, k, v, self.e_row, self.e_col, self.window, return_weights)
        if return_weights:
            out, weights = out
            return out.reshape(n, self.c_out, h, w), weights
        return out.reshape(n, self.c_out, h, w)


def local_self_attention(x: Tensor, params: LocalSelfAttention) -> Tensor:
    return params(x)


def fuse_elementwise(f_rgb: Tensor, f_evt: Tensor) -> Tensor:
    """No-attention fusion: plain element-wise sum, shape unchanged."""
    if f_rgb.shape != f_evt.shape:
        raise DimensionError(f"fuse_elementwise: shapes {f_rgb.shape} and {f_evt.shape} differ")
    return f_rgb + f_evt


class AdditiveAttention(Module):
    """Sigmoid gate per spatial site, computed from both modalities.

    ``h = psi . relu(W_rgb f_rgb + b + W_event f_evt) + b_psi`` and the output
    is ``f_evt * sigmoid(h)``, the gate broadcast over channels.
    """

    def __init__(self, rng, channels: int, hidden: int = None):
        hidden = hidden or max(1, channels // 2)
        self.W_RGB = he_normal(rng, (hidden, channels, 1, 1), channels)
        self.b_RGB = parameter(np.zeros(hidden))
        self.W_event = he_normal(rng, (hidden, channels, 1, 1), channels)
        self.psi = he_normal(rng, (1, hidden, 1, 1), hidden)
        self.b_psi = parameter(np.zeros(1))
        self.channels, self.hidden = channels, hidden

    def gate(self, f_rgb: Tensor, f_evt: Tensor) -> Tensor:
        if f_rgb.shape != f_evt.shape:
            raise DimensionError(f"additive_attention_fuse: shapes {f_rgb.shape} and {f_evt.shape} differ")
        if f_rgb.shape[1] != self.channels:
            raise DimensionError(f"additive_attention_fuse: axis 1 has {f_rgb.shape[1]} channels, "
                                 f"expected {self.channels}")
        joint = ops.conv2d(f_rgb, self.W_RGB, self.b_RGB) + ops.conv2d(f_evt, self.W_event)
        return ops.sigmoid(ops.conv2d(ops.relu(joint), self.psi, self.b_psi))

    def forward(self, f_rgb: Tensor, f_evt: Tensor) -> Tensor:
        return ops.gate(f_evt, self.gate(f_rgb, f_evt))


def additive_attention_fuse(f_rgb: Tensor, f_evt: Tensor, params: AdditiveAttention) -> Tensor:
    return params(f_rgb, f_evt)
