import numpy as np
import pytest

from drfuser.attention import (
    AdditiveAttention,
    LocalSelfAttention,
    additive_attention_fuse,
    fuse_elementwise,
    local_self_attention,
)
from drfuser.errors import ConfigError, DimensionError
from drfuser.gradcheck import check_gradients
from drfuser.tensor import Tensor, precision


def global_attention_reference(x, attn):
    """Every query attends to every pixel; plain loops over all pairs."""
    n, c_in, h, w = x.shape
    heads, d = attn.heads, attn.c_out // attn.heads
    half, r = d // 2, attn.window // 2
    wq = attn.W_Q.data[:, :, 0, 0]
    wk = attn.W_K.data[:, :, 0, 0]
    wv = attn.W_V.data[:, :, 0, 0]
    out = np.zeros((n, attn.c_out, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                q = wq @ x[b, :, i, j]
                for m in range(heads):
                    qm = q[m * d:(m + 1) * d]
                    logits, values = [], []
                    for u in range(h):
                        for v in range(w):
                            km = (wk @ x[b, :, u, v])[m * d:(m + 1) * d]
                            vm = (wv @ x[b, :, u, v])[m * d:(m + 1) * d]
                            pos = qm[:half] @ attn.e_row.data[u - i + r] + qm[half:] @ attn.e_col.data[v - j + r]
                            logits.append(qm @ km + pos)
                            values.append(vm)
                    logits = np.array(logits)
                    p = np.exp(logits - logits.max())
                    p /= p.sum()
                    out[b, m * d:(m + 1) * d, i, j] = p @ np.array(values)
    return out


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def additive_reference(f_rgb, f_evt, gate):
    """Direct per-site evaluation of the additive gate formula."""
    n, c, h, w = f_rgb.shape
    w_rgb = gate.W_RGB.data[:, :, 0, 0]
    w_evt = gate.W_event.data[:, :, 0, 0]
    psi = gate.psi.data[0, :, 0, 0]
    out = np.zeros_like(f_evt)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                hidden = np.maximum(w_rgb @ f_rgb[b, :, i, j] + gate.b_RGB.data + w_evt @ f_evt[b, :, i, j], 0)
                alpha = sigmoid(psi @ hidden + gate.b_psi.data[0])
                out[b, :, i, j] = f_evt[b, :, i, j] * alpha
    return out


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("channels", [4, 8])
def test_full_window_equals_global_attention(seed, channels):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        attn = LocalSelfAttention(rng, channels, 8, heads=2, window=7)
    x = rng.standard_normal((2, channels, 4, 4))
    out = local_self_attention(Tensor(x), attn).data
    assert np.max(np.abs(out - global_attention_reference(x, attn))) < 1e-5


def test_single_key_window_is_value_projection():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        attn = LocalSelfAttention(rng, 6, 8, heads=2, window=1)
    attn.e_row.data[:] = 0
    attn.e_col.data[:] = 0
    x = rng.standard_normal((1, 6, 5, 5))
    out = attn(Tensor(x)).data
    expected = np.einsum("oc,nchw->nohw", attn.W_V.data[:, :, 0, 0], x)
    assert np.allclose(out, expected, rtol=0, atol=1e-12)


def test_zero_keys_give_window_mean():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        attn = LocalSelfAttention(rng, 4, 4, heads=1, window=3)
    attn.W_K.data[:] = 0
    attn.e_row.data[:] = 0
    attn.e_col.data[:] = 0
    x = rng.standard_normal((1, 4, 5, 6))
    out = attn(Tensor(x)).data
    v = np.einsum("oc,nchw->nohw", attn.W_V.data[:, :, 0, 0], x)
    for i in range(5):
        for j in range(6):
            win = v[0, :, max(i - 1, 0):i + 2, max(j - 1, 0):j + 2].reshape(4, -1)
            assert np.allclose(out[0, :, i, j], win.mean(axis=1), atol=1e-12)


def test_attention_weights_are_distributions():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        attn = LocalSelfAttention(rng, 8, 8, heads=2, window=5)
    _, weights = attn(Tensor(rng.standard_normal((2, 8, 6, 7))), return_weights=True)
    assert np.all(weights >= 0)
    assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-6)


def test_translation_equivariance():
    rng = np.random.default_rng(6)
    with precision(np.float64):
        attn = LocalSelfAttention(rng, 4, 8, heads=2, window=3)
    x = np.zeros((1, 4, 14, 14))
    x[:, :, 3:9, 3:9] = rng.standard_normal((1, 4, 6, 6))
    dy, dx = 2, 3
    shifted = np.roll(x, (dy, dx), axis=(2, 3))
    a = attn(Tensor(x)).data
    b = attn(Tensor(shifted)).data
    # compare away from the image border where windows are complete in both
    assert np.max(np.abs(a[:, :, 1:11, 1:10] - b[:, :, 1 + dy:11 + dy, 1 + dx:10 + dx])) < 1e-5


def test_attention_rejects_bad_config_and_input():
    rng = np.random.default_rng(7)
    with pytest.raises(ConfigError):
        LocalSelfAttention(rng, 4, 8, heads=3)
    with pytest.raises(ConfigError):
        LocalSelfAttention(rng, 4, 8, heads=2, window=4)
    attn = LocalSelfAttention(rng, 4, 8, heads=2, window=3)
    with pytest.raises(DimensionError):
        attn(Tensor(np.zeros((1, 5, 4, 4))))


@pytest.mark.parametrize("seed", range(10))
def test_local_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        attn = LocalSelfAttention(rng, 4, 8, heads=2, window=3)
        x = Tensor(rng.standard_normal((2, 4, 4, 5)), requires_grad=True)
    weights = Tensor(rng.standard_normal((2, 8, 4, 5)))
    err = check_gradients(lambda: (attn(x) * weights).sum(), [x] + attn.parameters())
    assert err < 1e-3


def test_fuse_elementwise():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    out = fuse_elementwise(Tensor(a), Tensor(b)).data
    assert np.array_equal(fuse_elementwise(Tensor(a), Tensor(np.zeros_like(b))).data, a)
    assert np.array_equal(out, fuse_elementwise(Tensor(b), Tensor(a)).data)
    for idx in np.ndindex(a.shape):
        assert out[idx] == a[idx] + b[idx]
    for shape in [(1, 1, 1, 1), (2, 5, 3, 7), (4, 16, 8, 8)]:
        assert fuse_elementwise(Tensor(np.ones(shape)), Tensor(np.ones(shape))).shape == shape
    with pytest.raises(DimensionError):
        fuse_elementwise(Tensor(a), Tensor(np.zeros((2, 3, 4, 5))))


def test_additive_gate_half_and_saturated():
    rng = np.random.default_rng(9)
    with precision(np.float64):
        gate = AdditiveAttention(rng, 4)
    f_rgb, f_evt = Tensor(rng.standard_normal((2, 4, 3, 3))), Tensor(rng.standard_normal((2, 4, 3, 3)))
    gate.psi.data[:] = 0
    assert np.allclose(additive_attention_fuse(f_rgb, f_evt, gate).data, 0.5 * f_evt.data, atol=1e-15)
    gate.b_psi.data[:] = 50.0
    assert np.max(np.abs(gate(f_rgb, f_evt).data - f_evt.data)) < 1e-6


def test_additive_matches_scalar_formula():
    rng = np.random.default_rng(10)
    with precision(np.float64):
        gate = AdditiveAttention(rng, 6, hidden=5)
    gate.b_RGB.data[:] = rng.standard_normal(5)
    gate.b_psi.data[:] = 0.3
    f_rgb, f_evt = rng.standard_normal((2, 6, 3, 4)), rng.standard_normal((2, 6, 3, 4))
    out = gate(Tensor(f_rgb), Tensor(f_evt)).data
    assert np.max(np.abs(out - additive_reference(f_rgb, f_evt, gate))) < 1e-6


def test_additive_alpha_strictly_inside_unit_interval():
    rng = np.random.default_rng(11)
    with precision(np.float64):
        gate = AdditiveAttention(rng, 4)
    for scale in (0.1, 1.0, 5.0):
        alpha = gate.gate(Tensor(scale * rng.standard_normal((3, 4, 5, 5))),
                          Tensor(scale * rng.standard_normal((3, 4, 5, 5)))).data
        assert np.all((alpha > 0) & (alpha < 1))


@pytest.mark.parametrize("seed", range(10))
def test_additive_gradients(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        gate = AdditiveAttention(rng, 4)
        gate.b_RGB.data[:] = rng.standard_normal(gate.hidden)
        f_rgb = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
        f_evt = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
    weights = Tensor(rng.standard_normal((2, 4, 3, 3)))
    err = check_gradients(lambda: (gate(f_rgb, f_evt) * weights).sum(), [f_rgb, f_evt] + gate.parameters())
    assert err < 1e-3
