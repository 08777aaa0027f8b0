"""Central finite differences, the oracle for every backward rule."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from drfuser.tensor import Tensor


def finite_difference_grad(f: Callable[[], float], params: Sequence[Tensor], eps: float = 1e-5,
                           indices: Optional[Sequence[Optional[Iterable]]] = None,
                           shrink: int = 0) -> list:
    """Estimate d f / d p for each tensor in ``params``.

    ``f`` is evaluated with each coordinate nudged by +/- ``eps`` in place
    and must therefore read the tensors' current ``data``. When ``indices``
    is given, only those flat coordinates of the matching tensor are probed
    and the rest of the returned estimate is NaN.

    With ``shrink > 0`` the step is divided by 10, up to ``shrink`` times,
    while the forward and backward one-sided slopes disagree. On a smooth
    interval they differ by about ``eps * f''``; a larger gap means a kink
    (ReLU, max-pool switch) lies inside the interval.
    """
    if shrink:
        return [_kink_aware(f, p, eps, None if indices is None else indices[k], shrink)
                for k, p in enumerate(params)]
    estimates = []
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        est = np.zeros(flat.shape, dtype=np.float64)
        coords = range(flat.size)
        if indices is not None and indices[k] is not None:
            est[:] = np.nan
            coords = indices[k]
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f())
            flat[i] = orig - eps
            down = float(f())
            flat[i] = orig
            est[i] = (up - down) / (2 * eps)
        estimates.append(est.reshape(p.shape))
    return estimates


def _kink_aware(f, p: Tensor, eps: float, coords, shrink: int) -> np.ndarray:
    flat = p.data.reshape(-1)
    est = np.full(flat.shape, np.nan)
    f0 = float(f())
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        h = eps
        for attempt in range(shrink + 1):
            flat[i] = orig + h
            up = float(f())
            flat[i] = orig - h
            down = float(f())
            flat[i] = orig
            fwd, bwd = (up - f0) / h, (f0 - down) / h
            est[i] = (up - down) / (2 * h)
            if abs(fwd - bwd) <= 1e-3 * max(abs(fwd), abs(bwd), 1e-6):
                break
            h /= 10
    return est.reshape(p.shape)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all finite entries.

    The floor turns the comparison into an absolute one for gradients
    below ``floor`` in magnitude, where round-off dominates.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    keep = np.isfinite(n)
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    indices=None, shrink: int = 0) -> float:
    """Backprop ``loss_fn()`` once and compare with finite differences.

    Returns the worst relative error over all probed coordinates.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    numeric = finite_difference_grad(lambda: loss_fn().item(), params, eps=eps, indices=indices, shrink=shrink)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
