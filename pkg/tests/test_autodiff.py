import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gsa import autodiff as ad
from gsa.autodiff import Tape, Tensor, grad_check
from gsa.errors import ArgumentError, DimensionError, EvaluationError

from conftest import conv2d_reference


def _probe(shape, seed=0):
    """Fixed random weighting so f(x) = sum(probe * op(x)) is O(1)."""
    return np.random.default_rng(seed).normal(size=shape).astype(np.float32) / math.sqrt(np.prod(shape))


# ---------------------------------------------------------------- tensor / tape


def test_tensor_is_float32():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float32
    assert t.shape == (2, 2) and t.size == 4


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    assert not y.requires_grad


def test_tape_is_topological_and_fills_grads():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        y = ad.exp(x * 0.5)
        z = (y * x).sum()
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp is not x:
                assert id(inp) in seen
        seen.add(id(node.output))
    tape.backward(z)
    expected = np.exp(0.5 * np.arange(4.0)) * (1 + 0.5 * np.arange(4.0))
    np.testing.assert_allclose(x.grad, expected, rtol=1e-5)


def test_shared_input_gradient_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = (x * x + x).sum()
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(DimensionError):
        tape.backward(y)


# ---------------------------------------------------------------- conv2d


def test_conv_identity_1x1(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    out = ad.conv2d(x, w, Tensor(np.zeros(3)), 1, 0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_zero_weights(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    out = ad.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), Tensor(np.zeros(4)), 1, 1)
    assert not out.data.any()


def test_conv_matches_loop_reference_random_3x3(rng):
    x = rng.normal(size=(2, 3, 7, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1)
    np.testing.assert_allclose(out.data, conv2d_reference(x, w, b, 1, 1), atol=1e-5)


def test_conv_matches_reference_on_50_random_configs():
    rng = np.random.default_rng(7)
    for _ in range(50):
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
        cin, cout, n = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
        x = rng.normal(size=(n, cin, h, w)).astype(np.float32)
        wt = rng.normal(size=(cout, cin, k, k)).astype(np.float32)
        b = rng.normal(size=cout).astype(np.float32)
        out = ad.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, conv2d_reference(x, wt, b, stride, pad), atol=1e-4, rtol=1e-5)


def test_conv_dimension_errors_name_axis(rng):
    x = Tensor(rng.normal(size=(1, 3, 8, 8)))
    with pytest.raises(DimensionError, match="axis"):
        ad.conv2d(x, Tensor(np.zeros((2, 4, 3, 3))), None, 1, 1)
    with pytest.raises(DimensionError):
        ad.conv2d(x, Tensor(np.zeros((2, 3, 2, 2))), None, 1, 1)
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((2, 3, 5, 5))), None, 1, 0)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_gradients_match_finite_differences(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x0 = rng.normal(size=(1, 2, 5, 5))
    w0 = rng.normal(size=(3, 2, 3, 3)) * 0.5
    b0 = rng.normal(size=3)
    wt, bt, xt = Tensor(w0), Tensor(b0), Tensor(x0)
    shape = ad.conv2d(xt, wt, bt, stride, pad).shape
    probe = _probe(shape)
    assert grad_check(lambda x: (ad.conv2d(x, wt, bt, stride, pad) * probe).sum(), xt) < 1e-3
    assert grad_check(lambda w: (ad.conv2d(xt, w, bt, stride, pad) * probe).sum(), wt) < 1e-3
    assert grad_check(lambda b: (ad.conv2d(xt, wt, b, stride, pad) * probe).sum(), bt) < 1e-3


# ---------------------------------------------------------------- channel_scale / upsample / concat


def test_channel_scale_identity_and_zero(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(ad.channel_scale(x, Tensor(np.ones(3))).data, x.data)
    out = ad.channel_scale(x, Tensor([1.0, 0.0, 1.0])).data
    assert not out[:, 1].any()


def test_channel_scale_elementwise(rng):
    x = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
    out = ad.channel_scale(Tensor(x), Tensor([0.5, 2.0])).data
    for c, s in enumerate([0.5, 2.0]):
        for i in range(3):
            for j in range(3):
                assert out[0, c, i, j] == np.float32(x[0, c, i, j] * np.float32(s))


def test_channel_scale_gradients(rng):
    x = Tensor(rng.normal(size=(2, 3, 3, 3)))
    lam = Tensor(rng.normal(size=3))
    probe = _probe(x.shape)
    assert grad_check(lambda t: (ad.channel_scale(t, lam) * probe).sum(), x) < 1e-3
    assert grad_check(lambda l: (ad.channel_scale(x, l) * probe).sum(), lam) < 1e-3


def test_channel_scale_length_mismatch():
    with pytest.raises(DimensionError):
        ad.channel_scale(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(2)))


def test_upsample_identity_and_blocks():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(ad.upsample_nearest(x, 1).data, x.data)
    out = ad.upsample_nearest(x, 2).data[0, 0]
    np.testing.assert_array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    with pytest.raises(ArgumentError):
        ad.upsample_nearest(x, 0)


@pytest.mark.parametrize("factor", [1, 2, 3])
def test_upsample_sum_gradient_is_factor_squared(factor, rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    f = lambda t: ad.upsample_nearest(t, factor).sum() * (1.0 / 9)
    with Tape() as tape:
        y = f(xt := Tensor(x.data, requires_grad=True))
    tape.backward(y)
    np.testing.assert_allclose(xt.grad * 9, factor ** 2, rtol=1e-6)
    assert grad_check(f, x) < 1e-3


def test_concat_behaviour(rng):
    a = Tensor(rng.normal(size=(2, 1, 3, 3)))
    b = Tensor(rng.normal(size=(2, 1, 3, 3)))
    out = ad.concat_channels(a, b)
    np.testing.assert_array_equal(out.data[:, :1], a.data)
    np.testing.assert_array_equal(out.data[:, 1:], b.data)
    empty = ad.concat_channels(a, Tensor(np.zeros((2, 0, 3, 3))))
    np.testing.assert_array_equal(empty.data, a.data)
    with pytest.raises(DimensionError):
        ad.concat_channels(a, Tensor(np.zeros((2, 1, 4, 3))))


def test_concat_gradient_splits(rng):
    a = Tensor(rng.normal(size=(1, 2, 2, 2)))
    b = Tensor(rng.normal(size=(1, 3, 2, 2)))
    probe = _probe((1, 5, 2, 2))
    assert grad_check(lambda t: (ad.concat_channels(t, b) * probe).sum(), a) < 1e-3
    assert grad_check(lambda t: (ad.concat_channels(a, t) * probe).sum(), b) < 1e-3


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_logits():
    out = ad.softmax_with_temperature(Tensor(np.full((2, 5), 3.0)), 0.7).data
    np.testing.assert_allclose(out, 0.2, atol=1e-7)


def test_softmax_two_logit_case():
    out = ad.softmax_with_temperature(Tensor([2.0, 0.0]), 2.0).data
    e = math.e
    np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-6)
    np.testing.assert_allclose(out, [0.73106, 0.26894], atol=1e-5)


def test_softmax_high_temperature_limit(rng):
    out = ad.softmax_with_temperature(Tensor(rng.normal(size=(4, 6)) * 5), 1e6).data
    assert np.abs(out - 1 / 6).max() < 1e-5


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ArgumentError):
        ad.softmax_with_temperature(Tensor([1.0, 2.0]), 0.0)


@given(st.integers(1, 4), st.integers(2, 6), st.floats(0.3, 5.0), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one_and_grad(rows, cols, temp, seed):
    x = Tensor(np.random.default_rng(seed).normal(size=(rows, cols)) * 3)
    out = ad.softmax_with_temperature(x, temp).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    probe = _probe(x.shape, seed)
    assert grad_check(lambda t: (ad.softmax_with_temperature(t, temp) * probe).sum(), x) < 1e-3


# ---------------------------------------------------------------- elementwise primitives


@pytest.mark.parametrize("op", ["sigmoid", "silu", "exp", "log_softmax", "abs"])
def test_unary_primitive_gradients(op, rng):
    x = Tensor(rng.normal(size=(3, 4)) + (0.5 if op == "abs" else 0.0))
    fn = {"sigmoid": ad.sigmoid, "silu": ad.silu, "exp": lambda t: ad.exp(t * 0.5),
          "log_softmax": ad.log_softmax, "abs": ad.tabs}[op]
    probe = _probe(x.shape)
    assert grad_check(lambda t: (fn(t) * probe).sum(), x) < 1e-3


def test_bce_and_smooth_l1_gradients(rng):
    z = Tensor(rng.normal(size=(2, 3)) * 2)
    y = (rng.random((2, 3)) > 0.5).astype(np.float32)
    w = rng.random((2, 3)).astype(np.float32)
    assert grad_check(lambda t: ad.bce_with_logits(t, y, w), z) < 1e-3
    target = rng.normal(size=(2, 3)).astype(np.float32)
    assert grad_check(lambda t: ad.smooth_l1(t, target, w), z) < 1e-3


def test_bce_is_stable_at_saturation():
    out = ad.bce_with_logits(Tensor([100.0, -100.0]), np.array([1.0, 0.0])).item()
    assert 0 <= out < 1e-30 or out == 0.0


def test_broadcast_binary_gradients(rng):
    a = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(1, 3)))
    probe = _probe((2, 3))
    assert grad_check(lambda t: ((t * a + t / (a * a + 2.0)) * probe).sum(), b) < 1e-3


def test_getitem_gradient(rng):
    x = Tensor(rng.normal(size=(2, 4, 3)))
    probe = _probe((2, 2, 3))
    assert grad_check(lambda t: (ad.sigmoid(t[:, 1:3]) * probe).sum(), x) < 1e-3


# ---------------------------------------------------------------- grad_check itself


def test_grad_check_sum_is_exact():
    assert grad_check(lambda t: t.sum(), Tensor(np.random.default_rng(0).normal(size=7))) < 1e-4


def test_grad_check_raises_on_non_finite():
    with pytest.raises(EvaluationError):
        grad_check(lambda t: ad.log(t).sum(), Tensor([-1.0, 2.0]))


def test_forward_is_deterministic(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    a = ad.conv2d(x, w, None, 2, 1).data
    b = ad.conv2d(x, w, None, 2, 1).data
    assert a.tobytes() == b.tobytes()
