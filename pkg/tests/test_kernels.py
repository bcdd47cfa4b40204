"""numba and numpy kernel backends must agree."""

import numpy as np
import pytest

from svphw import _kernels

pytestmark = pytest.mark.skipif(not _kernels.HAS_NUMBA, reason="numba not installed")


def both(fn, *args):
    out = {}
    for name in ("numpy", "numba"):
        prev = _kernels.set_backend(name)
        try:
            out[name] = fn(*args)
        finally:
            _kernels.set_backend(prev)
    return out["numpy"], out["numba"]


def close(a, b, tol=1e-11):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            close(x, y, tol)
        return
    assert a.shape == b.shape and a.dtype == b.dtype
    np.testing.assert_allclose(a, b, atol=tol, rtol=tol)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 2, 5), (1, 0, 3), (1, 0, 1)])
def test_depthwise_backends_agree(rng, stride, pad, k):
    x = rng.normal(size=(2, 3, 10, 9))
    w = rng.normal(size=(3, k, k))
    a, b = both(_kernels.depthwise_forward, x, w, stride, pad)
    close(a, b)
    g = rng.normal(size=a.shape)
    close(*both(_kernels.depthwise_backward, x, w, g, stride, pad))


def test_depthwise_float32_backends_agree(rng):
    x = rng.normal(size=(1, 4, 16, 16)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3)).astype(np.float32)
    a, b = both(_kernels.depthwise_forward, x, w, 1, 1)
    close(a, b, tol=1e-5)


def test_direct_conv_backends_agree(rng):
    x = rng.normal(size=(2, 3, 7, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    for stride in (1, 2):
        close(*both(_kernels.conv2d_direct, x, w, stride, 1))


def test_warp_backends_agree(rng):
    src = rng.normal(size=(2, 3, 6, 7))
    flow = rng.uniform(-3, 3, size=(2, 2, 6, 7))
    out, _ = both(_kernels.bwarp_forward, src, flow)
    close(*both(_kernels.bwarp_forward, src, flow))
    g = rng.normal(size=out.shape)
    close(*both(_kernels.bwarp_backward, src, flow, g))
    close(*both(_kernels.splat_accumulate, src, flow))
    gnum = rng.normal(size=src.shape)
    gden = rng.normal(size=(2, 6, 7))
    close(*both(_kernels.splat_backward, src, flow, gnum, gden))


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        _kernels.set_backend("cuda")
