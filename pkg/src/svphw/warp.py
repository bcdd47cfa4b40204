"""Differentiable frame warping.

Flows are [N,2,H,W] in pixel units: channel 0 is the horizontal displacement
(positive = right), channel 1 the vertical one (positive = down).

* :func:`backward_warp` gathers: ``out(y, x) = src(y + dy, x + dx)`` with
  bilinear interpolation and border clamping.
* :func:`forward_warp_average` scatters every source pixel to its displaced
  position with bilinear weights and divides accumulated values by accumulated
  weights. Colliding sources average; pixels nobody lands on are holes.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import Tensor, _result, fp64, grad_check, mul, sum_

DEFAULT_EPSILON = 1e-6


@dataclass
class SplatResult:
    warped: Tensor
    validity: Tensor  # [N,1,H,W]; differentiable except through the hole threshold
    weight: np.ndarray  # accumulated splat weight [N,H,W]


def _check_flow(src, flow, who):
    n, _, h, w = src.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"{who}: flow shape {flow.shape} does not match frame shape {src.shape}")


def backward_warp(src, flow):
    """Sample ``src`` at ``grid + flow`` (target->source flow)."""
    _check_flow(src, flow, "backward_warp")
    sd, fd = src.data, flow.data.astype(src.dtype, copy=False)
    out = _kernels.bwarp_forward(sd, fd)

    def backward(g):
        gs, gf = _kernels.bwarp_backward(sd, fd, g)
        return gs, gf

    return _result(out, (src, flow), backward, "backward_warp")


def forward_warp_average(src, flow, epsilon=DEFAULT_EPSILON):
    """Average-splat ``src`` along ``flow`` (source->target flow)."""
    if not epsilon > 0:
        raise ValueError(f"forward_warp_average: epsilon must be > 0, got {epsilon}")
    _check_flow(src, flow, "forward_warp_average")
    sd, fd = src.data, flow.data.astype(src.dtype, copy=False)
    num, den = _kernels.splat_accumulate(sd, fd)
    valid = den >= epsilon
    safe = np.where(valid, den, 1.0)
    out = np.where(valid[:, None], num / safe[:, None], 0.0).astype(sd.dtype)

    def backward(g):
        gnum = np.where(valid[:, None], g / safe[:, None], 0.0).astype(sd.dtype)
        gden = np.where(valid, -(g * out).sum(axis=1) / safe, 0.0).astype(sd.dtype)
        return _kernels.splat_backward(sd, fd, gnum, gden)

    warped = _result(out, (src, flow), backward, "forward_warp_average")

    # validity = min(weight, 1) on covered pixels; the hole mask itself is a constant
    soft = valid & (den < 1.0)
    vals = np.where(valid, np.minimum(den, 1.0), 0.0).astype(sd.dtype)[:, None]

    def validity_backward(g):
        gden = np.where(soft, g[:, 0], 0.0).astype(sd.dtype)
        _, gflow = _kernels.splat_backward(sd, fd, np.zeros_like(num), gden)
        return (gflow,)

    validity = _result(vals, (flow,), validity_backward, "splat_validity")
    return SplatResult(warped=warped, validity=validity, weight=den)


def _interior_flow(rng, shape, max_int=1):
    # integer part in [-max_int, max_int], fractional part in [0.2, 0.8]
    base = rng.integers(-max_int, max_int + 1, size=shape).astype(np.float64)
    frac = rng.uniform(0.2, 0.8, size=shape)
    return base + frac


def flow_gradcheck_suite(seed=0, size=6, channels=2, step=1e-6):
    """Finite-difference check of both warps w.r.t. src and flow.

    Flows have fractional parts in [0.2, 0.8] so probes stay inside one
    bilinear cell; the splat flow is a small positive jitter so every target
    stays covered well above the hole threshold.
    Returns {kernel/argument: max relative error}.
    """
    rng = np.random.default_rng(seed)
    shape = (1, channels, size, size)
    src = rng.uniform(0.1, 0.9, size=shape)
    # keep sample points away from the clamped border
    flow = _interior_flow(rng, (1, 2, size, size), max_int=0) * rng.choice([-1.0, 1.0], size=(1, 2, size, size))
    ys, xs = np.mgrid[0:size, 0:size]
    inside = (xs + flow[0, 0] > 0) & (xs + flow[0, 0] < size - 1) & (ys + flow[0, 1] > 0) & (ys + flow[0, 1] < size - 1)
    flow[0, 0][~inside] = 0.5
    flow[0, 1][~inside] = 0.5
    flow[0, 0][xs == size - 1] = -0.5
    flow[0, 1][ys == size - 1] = -0.5
    weights = rng.normal(size=shape)
    report = {}
    with fp64():
        w = Tensor(weights)
        fl = Tensor(flow)
        s = Tensor(src)

        report["backward_warp/src"] = grad_check(lambda x: _wsum(backward_warp(x, fl), w), src, step)
        report["backward_warp/flow"] = grad_check(lambda f: _wsum(backward_warp(s, f), w), flow, step)
        # small jitter keeps every target pixel covered
        splat_flow = rng.uniform(0.2, 0.4, size=(1, 2, size, size))
        sf = Tensor(splat_flow)
        report["forward_warp_average/src"] = grad_check(
            lambda x: _wsum(forward_warp_average(x, sf).warped, w, covered=True), src, step
        )
        report["forward_warp_average/flow"] = grad_check(
            lambda f: _wsum(forward_warp_average(s, f).warped, w, covered=True), splat_flow, step
        )
    return report


def _wsum(t, w, covered=False):
    if covered:
        # first row/column receive the (1-f)^2 corner only; skip them to stay well above epsilon
        t = t[:, :, 1:, 1:]
        w = Tensor(w.data[:, :, 1:, 1:])
    return sum_(mul(t, w))
