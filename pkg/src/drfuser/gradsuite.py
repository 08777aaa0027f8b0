"""Finite-difference suite over every differentiable building block.

Each case builds 64-bit inputs from a seed, reduces the op's output with
random weights to a scalar, and compares backprop with central
differences. Shared by the ``gradcheck`` command and the test suite.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Tuple

import numpy as np

from drfuser import ops
from drfuser.attention import AdditiveAttention, LocalSelfAttention
from drfuser.gradcheck import check_gradients
from drfuser.tensor import Tensor, precision

Case = Tuple[Callable[[], Tensor], List[Tensor], object]

# the deep network has many ReLU/max-pool kinks; its probes shrink the step near one
_SHRINK = {"drfuser_forward": 3}


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _primitive_cases(rng, seed: int) -> Dict[str, Case]:
    x4 = _rand(rng, 2, 3, 5, 5)
    y4 = _rand(rng, 2, 3, 5, 5)
    w4, b4 = _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
    g3, be3 = _rand(rng, 3), _rand(rng, 3)
    a2, b2 = _rand(rng, 3, 4), _rand(rng, 4, 2)
    x2, wl, bl = _rand(rng, 3, 5), _rand(rng, 4, 5), _rand(rng, 4)
    alpha = _rand(rng, 2, 1, 5, 5)
    return {
        "add": (lambda: x4 + y4, [x4, y4], None),
        "sub": (lambda: x4 - y4, [x4, y4], None),
        "mul": (lambda: x4 * y4, [x4, y4], None),
        "scale": (lambda: x4 * 0.3, [x4], None),
        "reshape": (lambda: x4.reshape(6, 25), [x4], None),
        "sum": (lambda: x4.sum(), [x4], None),
        "mean": (lambda: x4.mean(), [x4], None),
        "matmul": (lambda: ops.matmul(a2, b2), [a2, b2], None),
        "linear": (lambda: ops.linear(x2, wl, bl), [x2, wl, bl], None),
        "conv2d": (lambda: ops.conv2d(x4, w4, b4, stride=2, padding=1), [x4, w4, b4], None),
        "batch_norm2d_train": (lambda: ops.batch_norm2d(x4, g3, be3, np.zeros(3), np.ones(3), training=True),
                               [x4, g3, be3], None),
        "batch_norm2d_eval": (lambda: ops.batch_norm2d(x4, g3, be3, np.full(3, 0.1), np.full(3, 2.0),
                                                       training=False), [x4, g3, be3], None),
        "relu": (lambda: ops.relu(x4), [x4], None),
        "sigmoid": (lambda: ops.sigmoid(x4), [x4], None),
        "softmax": (lambda: ops.softmax(x2), [x2], None),
        "max_pool2d": (lambda: ops.max_pool2d(x4, 3, 2, 1), [x4], None),
        "dropout": (lambda: ops.dropout(x4, 0.75, seed=seed), [x4], None),
        "concat_channels": (lambda: ops.concat_channels([x4, y4]), [x4, y4], None),
        "gate": (lambda: ops.gate(x4, alpha), [x4, alpha], None),
        "flatten": (lambda: ops.flatten(x4), [x4], None),
    }


def _fusion_cases(rng) -> Dict[str, Case]:
    attn = LocalSelfAttention(rng, 4, 8, heads=2, window=3)
    x = _rand(rng, 2, 4, 4, 5)
    gate = AdditiveAttention(rng, 4)
    gate.b_RGB.data[:] = rng.standard_normal(gate.hidden)
    f_rgb, f_evt = _rand(rng, 2, 4, 3, 3), _rand(rng, 2, 4, 3, 3)
    return {
        "local_self_attention": (lambda: attn(x), [x] + attn.parameters(), None),
        "additive_attention_fuse": (lambda: gate(f_rgb, f_evt), [f_rgb, f_evt] + gate.parameters(), None),
    }


def _huber_case(rng) -> Dict[str, Case]:
    from drfuser.training import huber_loss

    # spread residuals across both the quadratic and the linear branch
    pred = Tensor(rng.uniform(-3, 3, (6, 1)), requires_grad=True)
    target = Tensor(rng.uniform(-0.5, 0.5, (6, 1)), requires_grad=True)
    return {"huber_loss": (lambda: huber_loss(pred, target, 1.0), [pred, target], None)}


def _model_case(rng, seed: int, probes: int) -> Dict[str, Case]:
    from drfuser.model import build_model, desk_config
    from drfuser.training import huber_loss

    model = build_model(desk_config("self_attention"), seed)
    rgb = Tensor(rng.uniform(0, 1, (2, 3, 64, 64)))
    evt = Tensor(rng.uniform(0, 1, (2, 2, 64, 64)))
    target = Tensor(rng.standard_normal((2, 1)))
    params = model.parameters()
    chosen = sorted(rng.choice(len(params), size=min(probes, len(params)), replace=False))
    probe = [params[i] for i in chosen]
    indices = [[int(rng.integers(0, p.size))] for p in probe]
    return {"drfuser_forward": (lambda: huber_loss(model(rgb, evt, seed=seed), target), probe, indices)}


def _check(case: Case, rng, shrink: int) -> float:
    make, params, indices = case
    out = make()
    if out.ndim == 0:
        return check_gradients(make, params, indices=indices, shrink=shrink)
    weights = Tensor(rng.standard_normal(out.shape))
    return check_gradients(lambda: (make() * weights).sum(), params, indices=indices, shrink=shrink)


def run_suite(seeds: Iterable[int] = range(10), include_model: bool = True, model_probes: int = 10) -> Dict[str, float]:
    """Worst relative error per case over ``seeds``."""
    worst: Dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        with precision(np.float64):
            cases = {**_primitive_cases(rng, seed), **_fusion_cases(rng), **_huber_case(rng)}
            if include_model:
                cases.update(_model_case(rng, seed, model_probes))
            for name, case in cases.items():
                worst[name] = max(worst.get(name, 0.0), _check(case, rng, _SHRINK.get(name, 0)))
    return worst
