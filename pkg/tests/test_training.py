import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drfuser.errors import ContractError, DimensionError, NumericHealthError
from drfuser.gradcheck import finite_difference_grad
from drfuser.nn import parameter
from drfuser.tensor import Tensor, precision
from drfuser.training import (
    AdamWState,
    Metrics,
    TrainConfig,
    adamw_step,
    huber_loss,
    metrics,
)


def huber64(x, delta=1.0):
    with precision(np.float64):
        return huber_loss(Tensor(np.array([[x]])), Tensor(np.zeros((1, 1))), delta).item()


def test_huber_closed_forms():
    assert huber64(0.0) == 0.0
    assert huber64(0.5) == 0.125
    assert huber64(2.0) == 1.5
    assert huber64(-2.0) == 1.5


def test_huber_is_batch_mean():
    pred = np.array([[0.5], [2.0], [0.0], [-3.0]])
    with precision(np.float64):
        loss = huber_loss(Tensor(pred), Tensor(np.zeros((4, 1)))).item()
    assert loss == pytest.approx((0.125 + 1.5 + 0.0 + 2.5) / 4, abs=1e-15)


def test_huber_shape_and_delta_errors():
    with pytest.raises(DimensionError):
        huber_loss(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))))
    with pytest.raises(ContractError):
        huber_loss(Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 1))), delta=0.0)


@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
def test_huber_gradient_matches_piecewise_form(delta):
    xs = np.array([-3.0, -delta - 0.1, -0.3, 0.0, 0.2, delta - 0.05, delta + 0.05, 4.0])
    with precision(np.float64):
        pred = Tensor(xs.reshape(-1, 1), requires_grad=True)
        target = Tensor(np.zeros((xs.size, 1)))
        huber_loss(pred, target, delta).backward()
        numeric = finite_difference_grad(lambda: huber_loss(pred, target, delta).item(), [pred], eps=1e-6)[0]
    expected = np.where(np.abs(xs) < delta, xs, delta * np.sign(xs)) / xs.size
    assert np.allclose(pred.grad.reshape(-1), expected, atol=1e-15)
    assert np.allclose(numeric.reshape(-1), expected, atol=1e-8)


def test_huber_derivative_continuous_at_delta():
    delta, h = 1.0, 1e-3
    grid = np.arange(delta - 0.05, delta + 0.05 + h / 2, h)
    slopes = np.array([(huber64(x + 1e-7) - huber64(x - 1e-7)) / 2e-7 for x in grid])
    assert np.max(np.abs(np.diff(slopes))) <= h + 1e-6
    assert abs(huber64(delta + 1e-12) - huber64(delta - 1e-12)) < 1e-6


def test_metrics_fixtures():
    assert metrics([0.1, -0.2], [0.1, -0.2]) == Metrics(0.0, 0.0, 2)
    assert metrics([1.5, 0.0, -1.0], [0.5, -1.0, -2.0]) == Metrics(1.0, 1.0, 3)
    assert metrics([1.0, -1.0], [0.0, 0.0]) == Metrics(1.0, 1.0, 2)
    with pytest.raises(ContractError):
        metrics([], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=40))
def test_rmse_dominates_mae(pairs):
    m = metrics([p for p, _ in pairs], [t for _, t in pairs])
    assert m.rmse >= m.mae - 1e-12 >= -1e-12


def scalar_adamw(w, grads, cfg):
    """Element-by-element reference of the decoupled-decay Adam update."""
    w = [float(v) for v in w]
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, g in enumerate(grads, start=1):
        for i in range(len(w)):
            m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i]
            v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i]
            mhat = m[i] / (1 - cfg.beta1 ** t)
            vhat = v[i] / (1 - cfg.beta2 ** t)
            w[i] = w[i] - cfg.learning_rate * cfg.weight_decay * w[i]
            w[i] = w[i] - cfg.learning_rate * mhat / (math.sqrt(vhat) + cfg.eps)
    return np.array(w)


@pytest.mark.parametrize("seed", range(3))
def test_adamw_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.05)
    with precision(np.float64):
        p = parameter(rng.standard_normal(6))
    w0 = p.data.copy()
    grads = [rng.standard_normal(6) for _ in range(100)]
    state = AdamWState.zeros([p])
    for g in grads:
        adamw_step([p], [g], state, cfg)
    assert np.max(np.abs(p.data - scalar_adamw(w0, grads, cfg))) < 1e-7
    assert state.step == 100


def test_adamw_decay_only():
    with precision(np.float64):
        p = parameter(np.array([1.0, -2.0, 0.5]))
    w0 = p.data.copy()
    adamw_step([p], [np.zeros(3)], AdamWState.zeros([p]), TrainConfig(weight_decay=0.0))
    assert np.array_equal(p.data, w0)
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.3)
    adamw_step([p], [np.zeros(3)], AdamWState.zeros([p]), cfg)
    assert np.allclose(p.data, w0 * (1 - 0.1 * 0.3), rtol=0, atol=1e-15)


def test_adamw_rejects_nan_gradient_by_name():
    p = parameter(np.zeros(2))
    with pytest.raises(NumericHealthError, match="head.weight"):
        adamw_step([p], [np.array([0.0, np.nan])], AdamWState.zeros([p]), TrainConfig(), names=["head.weight"])


def test_adamw_rejects_mismatched_state():
    p = parameter(np.zeros(2))
    with pytest.raises(ContractError):
        adamw_step([p], [np.zeros(2)], AdamWState.zeros([parameter(np.zeros(3))]), TrainConfig())
