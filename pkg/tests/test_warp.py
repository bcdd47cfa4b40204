import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svphw import _kernels
from svphw.tensor import Tensor
from svphw.warp import backward_warp, flow_gradcheck_suite, forward_warp_average


def frame(h=4, w=5, c=1, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(1, c, h, w))


def const_flow(h, w, dx, dy):
    f = np.zeros((1, 2, h, w))
    f[:, 0], f[:, 1] = dx, dy
    return f


def bw(src, flow):
    return backward_warp(Tensor(src), Tensor(flow)).data


def fw(src, flow):
    return forward_warp_average(Tensor(src), Tensor(flow))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backward_zero_flow_is_bit_exact(dtype):
    src = frame(6, 7, 3).astype(dtype)
    out = bw(src, np.zeros((1, 2, 6, 7), dtype))
    assert out.dtype == dtype
    assert np.array_equal(out, src)


def test_forward_zero_flow_is_identity():
    src = frame(6, 7, 2)
    r = fw(src, np.zeros((1, 2, 6, 7)))
    assert np.array_equal(r.warped.data, src)
    assert np.array_equal(r.validity.data, np.ones((1, 1, 6, 7)))


def test_backward_integer_shift_with_border_clamp():
    src = frame()
    out = bw(src, const_flow(4, 5, 1.0, 0.0))
    np.testing.assert_array_equal(out[..., :-1], src[..., 1:])
    np.testing.assert_array_equal(out[..., -1], src[..., -1])
    out = bw(src, const_flow(4, 5, 0.0, -2.0))
    np.testing.assert_array_equal(out[..., 2:, :], src[..., :-2, :])
    np.testing.assert_array_equal(out[..., 0, :], src[..., 0, :])
    np.testing.assert_array_equal(out[..., 1, :], src[..., 0, :])


def test_backward_half_pixel_is_neighbour_mean():
    src = np.array([[[[0.0, 1.0, 4.0]]]])
    out = bw(src, const_flow(1, 3, 0.5, 0.0))
    np.testing.assert_array_equal(out[0, 0, 0], [0.5, 2.5, 4.0])


def test_forward_integer_shift_leaves_hole():
    src = frame()
    r = fw(src, const_flow(4, 5, 1.0, 0.0))
    np.testing.assert_array_equal(r.warped.data[..., 1:], src[..., :-1])
    np.testing.assert_array_equal(r.warped.data[..., 0], 0.0)
    np.testing.assert_array_equal(r.validity.data[0, 0, :, 0], 0.0)
    np.testing.assert_array_equal(r.validity.data[0, 0, :, 1:], 1.0)


def test_forward_multi_mapping_averages():
    src = np.array([[[[0.25, 0.75, 0.5]]]])
    flow = np.zeros((1, 2, 1, 3))
    flow[0, 0, 0, 0] = 1.0  # 0.25 lands on 0.75's pixel
    r = fw(src, flow)
    np.testing.assert_array_equal(r.warped.data[0, 0, 0], [0.0, 0.5, 0.5])
    np.testing.assert_array_equal(r.weight[0, 0], [0.0, 2.0, 1.0])
    np.testing.assert_array_equal(r.validity.data[0, 0, 0], [0.0, 1.0, 1.0])


def test_forward_fractional_target_splits_weight():
    src = np.array([[[[0.0, 1.0, 0.0, 0.0]]]])
    flow = np.zeros((1, 2, 1, 4))
    flow[0, 0, 0, 1] = 0.5
    num, den = _kernels.splat_accumulate(src, flow)
    np.testing.assert_array_equal(den[0, 0], [1.0, 0.5, 1.5, 1.0])
    np.testing.assert_array_equal(num[0, 0, 0], [0.0, 0.5, 0.5, 0.0])


def test_forward_hole_everywhere_when_flow_leaves_frame():
    src = frame()
    r = fw(src, const_flow(4, 5, 10.0, 0.0))
    assert np.all(r.warped.data == 0.0)
    assert np.all(r.validity.data == 0.0)


def dyadic_interior(rng, h, w, margin=2):
    """Flows that keep every splat corner inside the frame; values are multiples of 1/4."""
    ys, xs = np.mgrid[0:h, 0:w]
    dx = rng.integers(-4, 5, size=(h, w)) / 4.0
    dy = rng.integers(-4, 5, size=(h, w)) / 4.0
    dx = np.clip(dx, -xs, w - 1 - xs - 1)  # leave room for the x+1 corner
    dy = np.clip(dy, -ys, h - 1 - ys - 1)
    return np.stack([dx, dy])[None]


def test_splat_conserves_mass_on_interior_flows():
    rng = np.random.default_rng(3)
    h, w = 8, 9
    src = rng.integers(0, 256, size=(1, 2, h, w)) / 256.0
    flow = dyadic_interior(rng, h, w)
    num, den = _kernels.splat_accumulate(src, flow)
    assert den.sum() == h * w
    assert np.array_equal(num.sum(axis=(2, 3)), src.sum(axis=(2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_splat_mass_property(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(3, 8, size=2)
    src = rng.integers(0, 256, size=(1, 1, h, w)) / 256.0
    num, den = _kernels.splat_accumulate(src, dyadic_interior(rng, h, w))
    assert den.sum() == h * w
    assert num.sum() == src.sum()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_warp_stays_in_source_range(seed, dx, dy):
    src = frame(5, 6, 1, seed % 1000)
    out = bw(src, const_flow(5, 6, dx, dy))
    assert out.min() >= src.min() - 1e-12
    assert out.max() <= src.max() + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_warp_output_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    src = rng.uniform(0.1, 0.9, size=(1, 1, 5, 6))
    r = fw(src, rng.uniform(-2, 2, size=(1, 2, 5, 6)))
    covered = r.validity.data[0, 0] > 0
    vals = r.warped.data[0, 0]
    assert np.all(vals[~covered] == 0.0)
    assert np.all(vals[covered] >= src.min() - 1e-9)
    assert np.all(vals[covered] <= src.max() + 1e-9)
    assert np.all((r.validity.data >= 0) & (r.validity.data <= 1))


def test_flow_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="flow shape"):
        bw(frame(), np.zeros((1, 2, 3, 5)))
    with pytest.raises(ValueError, match="epsilon"):
        forward_warp_average(Tensor(frame()), Tensor(np.zeros((1, 2, 4, 5))), epsilon=0.0)


def test_warp_gradients_pass_finite_differences():
    errors = flow_gradcheck_suite(seed=1)
    assert set(errors) == {"backward_warp/src", "backward_warp/flow", "forward_warp_average/src", "forward_warp_average/flow"}
    for name, err in errors.items():
        assert err < 1e-4, name
