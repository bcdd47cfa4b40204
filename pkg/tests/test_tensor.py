import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svphw import tensor as T
from svphw.tensor import GradientTape, Tensor, grad_check

from conftest import naive_conv2d, naive_depthwise


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 2, 5), (2, 2, 5), (1, 0, 1)])
@pytest.mark.parametrize("impl", ["im2col", "direct"])
def test_conv2d_matches_nested_loops(f64, rng, stride, pad, k, impl):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, impl=impl).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, pad), atol=1e-12)


def test_im2col_and_direct_agree_in_float32(rng):
    x = rng.normal(size=(1, 8, 16, 16)).astype(np.float32)
    w = rng.normal(size=(6, 8, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), None, 1, 1, impl="im2col").data
    b = T.conv2d(Tensor(x), Tensor(w), None, 1, 1, impl="direct").data
    assert a.dtype == np.float32
    assert np.max(np.abs(a - b)) < 1e-5


def test_conv2d_rejects_bad_shapes(rng):
    x = Tensor(rng.normal(size=(1, 3, 5, 5)))
    with pytest.raises(ValueError, match="channels"):
        T.conv2d(x, Tensor(rng.normal(size=(2, 4, 3, 3))))
    with pytest.raises(ValueError, match="odd"):
        T.conv2d(x, Tensor(rng.normal(size=(2, 3, 2, 2))))
    with pytest.raises(ValueError, match="output size"):
        T.conv2d(Tensor(rng.normal(size=(1, 3, 2, 2))), Tensor(rng.normal(size=(2, 3, 5, 5))))


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 2, 5), (1, 0, 3)])
def test_depthwise_matches_nested_loops(f64, rng, stride, pad, k):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(3, 1, k, k))
    got = T.depthwise_conv2d(Tensor(x), Tensor(w), None, stride, pad).data
    np.testing.assert_allclose(got, naive_depthwise(x, w[:, 0], stride, pad), atol=1e-12)


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh", "exp", "log", "square"])
def test_unary_gradients(kind):
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    if kind == "log":
        x = np.abs(x)
    w = rng.normal(size=x.shape)
    err = grad_check(lambda t: T.sum_(T.mul(T.pointwise_unary(t, kind), Tensor(w))), x)
    assert err < 1e-6


def test_gradient_accumulates_over_fan_out():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with GradientTape() as tape:
        y = T.sum_(T.add(T.mul(x, x), T.mul(x, 3.0)))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_allclose(g, 2 * x.data + 3.0)


def test_unreachable_source_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    z = Tensor(np.ones(2), requires_grad=True)
    with GradientTape() as tape:
        y = T.sum_(x)
    gx, gz = tape.gradient(y, [x, z])
    np.testing.assert_array_equal(gz, 0.0)
    np.testing.assert_array_equal(gx, 1.0)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    assert not T.add(x, x).requires_grad


def test_stop_gradient_blocks_flow():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with GradientTape() as tape:
        y = T.sum_(T.mul(T.stop_gradient(x), x))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_allclose(g, [2.0])


def test_upsample_nearest_and_adjoint(f64, rng):
    x = rng.normal(size=(1, 2, 3, 4))
    up = T.upsample_nearest2x(Tensor(x)).data
    np.testing.assert_array_equal(up, x.repeat(2, axis=2).repeat(2, axis=3))
    g = rng.normal(size=up.shape)
    err = grad_check(lambda t: T.sum_(T.mul(T.upsample_nearest2x(t), Tensor(g))), x)
    assert err < 1e-7


def test_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)) * 30)
    s = T.softmax(x, axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(s >= 0)


def test_clamp_passes_gradient_only_inside():
    x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
    with GradientTape() as tape:
        y = T.sum_(T.clamp(x, -1.0, 1.0))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def scalar_lstm(gates, cell):
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    i, f, g, o = gates
    c = sig(f) * cell + sig(i) * np.tanh(g)
    return sig(o) * np.tanh(c), c


def test_lstm_cell_matches_scalar_formula(f64, rng):
    ch = 3
    gates = rng.normal(size=(2, 4 * ch, 2, 2))
    cell = rng.normal(size=(2, ch, 2, 2))
    out = T.lstm_cell(Tensor(gates), Tensor(cell)).data
    for idx in np.ndindex(2, ch, 2, 2):
        n, c, y, x = idx
        g4 = [gates[n, c + q * ch, y, x] for q in range(4)]
        h, cn = scalar_lstm(g4, cell[idx])
        assert out[n, c, y, x] == pytest.approx(h, abs=1e-12)
        assert out[n, ch + c, y, x] == pytest.approx(cn, abs=1e-12)


def test_se_scale_matches_scalar_formula(f64, rng):
    x = rng.normal(size=(2, 4, 3, 3))
    w1, b1 = rng.normal(size=(2, 4)), rng.normal(size=2)
    w2, b2 = rng.normal(size=(4, 2)), rng.normal(size=4)
    out = T.se_scale(*(Tensor(a) for a in (x, w1, b1, w2, b2))).data
    for n in range(2):
        pooled = [x[n, c].mean() for c in range(4)]
        hidden = [max(0.0, sum(w1[j, c] * pooled[c] for c in range(4)) + b1[j]) for j in range(2)]
        for c in range(4):
            gate = 1.0 / (1.0 + np.exp(-(sum(w2[c, j] * hidden[j] for j in range(2)) + b2[c])))
            np.testing.assert_allclose(out[n, c], x[n, c] * gate, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 9), st.sampled_from([1, 2]))
def test_conv_output_shape_property(n, c, size, stride):
    x = Tensor(np.ones((n, c, size, size)))
    w = Tensor(np.ones((2, c, 3, 3)))
    out = T.conv2d(x, w, None, stride, 1)
    assert out.shape == (n, 2, (size - 1) // stride + 1, (size - 1) // stride + 1)


def test_grad_check_detects_a_wrong_gradient():
    def broken(x):
        def backward(g):
            return (g * 0.0,)

        return T.sum_(T._result(x.data * 2.0, (x,), backward, "broken"))

    assert grad_check(broken, np.ones(3)) > 0.5


def test_debug_mode_flags_nonfinite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            T.log(Tensor(np.array([0.0, -1.0])))
    finally:
        T.set_debug(False)
