"""Hot loops: direct convolution, depthwise convolution, bilinear gather and
average splatting, each with a numba-jitted and a pure-numpy implementation.

The backend is picked once at import from ``SVPHW_BACKEND`` ("numba" or
"numpy"; default numba when importable) and can be switched at runtime with
:func:`set_backend`. Both backends compute the same quantities; only the
accumulation order differs, so float32 results may differ in the last ulp.
"""

import os
import math

import numpy as np

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _initial_backend():
    name = os.environ.get("SVPHW_BACKEND", "numba" if HAS_NUMBA else "numpy").lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"SVPHW_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        name = "numpy"
    return name


_backend = _initial_backend()


def get_backend():
    return _backend


def set_backend(name):
    """Select "numba" or "numpy" kernels; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev


# ---------------------------------------------------------------------------
# direct convolution (reference path, forward only)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _conv2d_direct_nb(x, w, stride, pad):
    n_batch, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n_batch, c_out, ho, wo), dtype=x.dtype)
    for n in range(n_batch):
        for co in range(c_out):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for ky in range(k):
                            iy = oy * stride - pad + ky
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(k):
                                ix = ox * stride - pad + kx
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[n, ci, iy, ix] * w[co, ci, ky, kx]
                    out[n, co, oy, ox] = acc
    return out


def _conv2d_direct_np(x, w, stride, pad):
    n_batch, _, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n_batch, c_out, ho, wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride]
            out += np.einsum("oc,nchw->nohw", w[:, :, ky, kx], patch)
    return out


def conv2d_direct(x, w, stride, pad):
    if _backend == "numba":
        return _conv2d_direct_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, pad)
    return _conv2d_direct_np(x, w, stride, pad)


# ---------------------------------------------------------------------------
# depthwise convolution, kernel (C, K, K)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _phases_nb(x, pad, stride):
    # flat ph[py, px, n, c, i, j] = padded_x[n, c, i*stride + py, j*stride + px]
    n_batch, c, h, wd = x.shape
    hq = (h + 2 * pad + stride - 1) // stride
    wq = (wd + 2 * pad + stride - 1) // stride
    ph = np.zeros(stride * stride * n_batch * c * hq * wq, dtype=x.dtype)
    plane = n_batch * c * hq * wq
    for n in range(n_batch):
        for ch in range(c):
            base = (n * c + ch) * hq
            for y in range(h):
                yp = y + pad
                src = x[n, ch, y]
                for px in range(stride):
                    x0 = (px - pad) % stride
                    cnt = (wd - x0 + stride - 1) // stride
                    o = ((yp % stride) * stride + px) * plane + (base + yp // stride) * wq + (x0 + pad) // stride
                    dst = ph[o : o + cnt]
                    for t in range(cnt):
                        dst[t] = src[x0 + t * stride]
    return ph, hq, wq


@njit(cache=True)
def _unphase_nb(ph, shape, pad, stride, hq, wq):
    n_batch, c, h, wd = shape
    out = np.empty(shape, dtype=ph.dtype)
    plane = n_batch * c * hq * wq
    for n in range(n_batch):
        for ch in range(c):
            base = (n * c + ch) * hq
            for y in range(h):
                yp = y + pad
                dst = out[n, ch, y]
                for px in range(stride):
                    x0 = (px - pad) % stride
                    cnt = (wd - x0 + stride - 1) // stride
                    o = ((yp % stride) * stride + px) * plane + (base + yp // stride) * wq + (x0 + pad) // stride
                    src = ph[o : o + cnt]
                    for t in range(cnt):
                        dst[x0 + t * stride] = src[t]
    return out


# Taps read contiguous rows of one phase plane, so inner loops are unit-stride
# for any stride. Flat indexing avoids per-row view construction, which costs
# more than the arithmetic at these widths.
@njit(cache=True, fastmath=True)
def _dw_forward_any_nb(x, w, stride, pad):
    n_batch, c, h, wd = x.shape
    k = w.shape[1]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    ph, hq, wq = _phases_nb(x, pad, stride)
    plane = n_batch * c * hq * wq
    out = np.zeros(n_batch * c * ho * wo, dtype=x.dtype)
    for n in range(n_batch):
        for ch in range(c):
            base = (n * c + ch) * hq
            for oy in range(ho):
                d = ((n * c + ch) * ho + oy) * wo
                for ky in range(k):
                    for kx in range(k):
                        wv = w[ch, ky, kx]
                        phase = (ky % stride) * stride + kx % stride
                        o = phase * plane + (base + oy + ky // stride) * wq + kx // stride
                        src = ph[o : o + wo]
                        dst = out[d : d + wo]
                        for ox in range(wo):
                            dst[ox] += wv * src[ox]
    return out.reshape((n_batch, c, ho, wo))


@njit(cache=True, fastmath=True)
def _dw_backward_any_nb(x, w, g, stride, pad):
    n_batch, c, h, wd = x.shape
    k = w.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    ph, hq, wq = _phases_nb(x, pad, stride)
    plane = n_batch * c * hq * wq
    gph = np.zeros_like(ph)
    gw = np.zeros_like(w)
    gf = g.ravel()
    for n in range(n_batch):
        for ch in range(c):
            base = (n * c + ch) * hq
            for oy in range(ho):
                d = ((n * c + ch) * ho + oy) * wo
                for ky in range(k):
                    for kx in range(k):
                        wv = w[ch, ky, kx]
                        phase = (ky % stride) * stride + kx % stride
                        o = phase * plane + (base + oy + ky // stride) * wq + kx // stride
                        src = ph[o : o + wo]
                        dst = gph[o : o + wo]
                        grow = gf[d : d + wo]
                        acc = wv - wv  # dtype-preserving zero (wv * 0 would promote to float64)
                        for ox in range(wo):
                            dst[ox] += wv * grow[ox]
                            acc += grow[ox] * src[ox]
                        gw[ch, ky, kx] += acc
    return _unphase_nb(gph, x.shape, pad, stride, hq, wq), gw


# 3x3 stride-1 is the bulk of the model's depthwise work; fusing the three
# horizontal taps of a kernel row into one pass cuts loop overhead threefold.
@njit(cache=True, fastmath=True)
def _dw3_forward_nb(x, w, pad):
    n_batch, c, h, wd = x.shape
    ho = h + 2 * pad - 2
    wo = wd + 2 * pad - 2
    ph, hq, wq = _phases_nb(x, pad, 1)
    out = np.zeros(n_batch * c * ho * wo, dtype=x.dtype)
    for n in range(n_batch):
        for ch in range(c):
            base = (n * c + ch) * hq
            for oy in range(ho):
                d = ((n * c + ch) * ho + oy) * wo
                dst = out[d : d + wo]
                for ky in range(3):
                    w0 = w[ch, ky, 0]
                    w1 = w[ch, ky, 1]
                    w2 = w[ch, ky, 2]
                    o = (base + oy + ky) * wq
                    r = ph[o : o + wo + 2]
                    for ox in range(wo):
                        dst[ox] += w0 * r[ox] + w1 * r[ox + 1] + w2 * r[ox + 2]
    return out.reshape((n_batch, c, ho, wo))


@njit(cache=True, fastmath=True)
def _dw3_backward_nb(x, w, g, pad):
    n_batch, c, h, wd = x.shape
    ho, wo = g.shape[2], g.shape[3]
    # stride-1 input gradient = correlation of g with the flipped kernel
    gx = _dw3_forward_nb(g, w[:, ::-1, ::-1].copy(), 2 - pad)
    ph, hq, wq = _phases_nb(x, pad, 1)
    gw = np.zeros_like(w)
    for n in range(n_batch):
        for ch in range(c):
            base = (n * c + ch) * hq
            for oy in range(ho):
                grow = g[n, ch, oy]
                for ky in range(3):
                    o = (base + oy + ky) * wq
                    r = ph[o : o + wo + 2]
                    a0 = w[0, 0, 0] - w[0, 0, 0]
                    a1 = a0
                    a2 = a0
                    for ox in range(wo):
                        gv = grow[ox]
                        a0 += gv * r[ox]
                        a1 += gv * r[ox + 1]
                        a2 += gv * r[ox + 2]
                    gw[ch, ky, 0] += a0
                    gw[ch, ky, 1] += a1
                    gw[ch, ky, 2] += a2
    return gx, gw


def _dw_forward_nb(x, w, stride, pad):
    if stride == 1 and w.shape[1] == 3 and pad <= 2:
        return _dw3_forward_nb(x, w, pad)
    return _dw_forward_any_nb(x, w, stride, pad)


def _dw_backward_nb(x, w, g, stride, pad):
    if stride == 1 and w.shape[1] == 3 and pad <= 2:
        return _dw3_backward_nb(x, w, g, pad)
    return _dw_backward_any_nb(x, w, g, stride, pad)


def _window(xp, ky, kx, stride, ho, wo):
    return xp[:, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride]


def _dw_forward_np(x, w, stride, pad):
    n_batch, c, h, wd = x.shape
    k = w.shape[1]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n_batch, c, ho, wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            out += _window(xp, ky, kx, stride, ho, wo) * w[None, :, ky, kx, None, None]
    return out


def _dw_backward_np(x, w, g, stride, pad):
    n_batch, c, h, wd = x.shape
    k = w.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for ky in range(k):
        for kx in range(k):
            _window(gxp, ky, kx, stride, ho, wo)[...] += g * w[None, :, ky, kx, None, None]
            gw[:, ky, kx] = np.einsum("nchw,nchw->c", g, _window(xp, ky, kx, stride, ho, wo))
    return gxp[:, :, pad : pad + h, pad : pad + wd], gw


def depthwise_forward(x, w, stride, pad):
    if _backend == "numba":
        return _dw_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, pad)
    return _dw_forward_np(x, w, stride, pad)


def depthwise_backward(x, w, g, stride, pad):
    if _backend == "numba":
        return _dw_backward_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(g), stride, pad
        )
    return _dw_backward_np(x, w, g, stride, pad)


# ---------------------------------------------------------------------------
# backward warp: bilinear gather with border clamp
# ---------------------------------------------------------------------------


@njit(cache=True)
def _bwarp_forward_nb(src, flow):
    n_batch, c, h, w = src.shape
    out = np.empty_like(src)
    for n in range(n_batch):
        for y in range(h):
            for x in range(w):
                sx = min(max(x + flow[n, 0, y, x], 0.0), w - 1.0)
                sy = min(max(y + flow[n, 1, y, x], 0.0), h - 1.0)
                x0 = int(math.floor(sx))
                y0 = int(math.floor(sy))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                fx = sx - x0
                fy = sy - y0
                for ch in range(c):
                    top = (1.0 - fx) * src[n, ch, y0, x0] + fx * src[n, ch, y0, x1]
                    bot = (1.0 - fx) * src[n, ch, y1, x0] + fx * src[n, ch, y1, x1]
                    out[n, ch, y, x] = (1.0 - fy) * top + fy * bot
    return out


@njit(cache=True)
def _bwarp_backward_nb(src, flow, g):
    n_batch, c, h, w = src.shape
    gsrc = np.zeros_like(src)
    gflow = np.zeros_like(flow)
    for n in range(n_batch):
        for y in range(h):
            for x in range(w):
                gx = x + flow[n, 0, y, x]
                gy = y + flow[n, 1, y, x]
                sx = min(max(gx, 0.0), w - 1.0)
                sy = min(max(gy, 0.0), h - 1.0)
                x0 = int(math.floor(sx))
                y0 = int(math.floor(sy))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                fx = sx - x0
                fy = sy - y0
                dsx = 0.0
                dsy = 0.0
                for ch in range(c):
                    go = g[n, ch, y, x]
                    v00 = src[n, ch, y0, x0]
                    v01 = src[n, ch, y0, x1]
                    v10 = src[n, ch, y1, x0]
                    v11 = src[n, ch, y1, x1]
                    gsrc[n, ch, y0, x0] += go * (1.0 - fy) * (1.0 - fx)
                    gsrc[n, ch, y0, x1] += go * (1.0 - fy) * fx
                    gsrc[n, ch, y1, x0] += go * fy * (1.0 - fx)
                    gsrc[n, ch, y1, x1] += go * fy * fx
                    dsx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                    dsy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                if 0.0 <= gx <= w - 1.0:
                    gflow[n, 0, y, x] = dsx
                if 0.0 <= gy <= h - 1.0:
                    gflow[n, 1, y, x] = dsy
    return gsrc, gflow


def _bwarp_coords(flow, h, w):
    gx = np.arange(w, dtype=flow.dtype)[None, None, :] + flow[:, 0]
    gy = np.arange(h, dtype=flow.dtype)[None, :, None] + flow[:, 1]
    sx = np.clip(gx, 0.0, w - 1.0)
    sy = np.clip(gy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0).astype(flow.dtype)
    fy = (sy - y0).astype(flow.dtype)
    return gx, gy, x0, y0, x1, y1, fx, fy


def _gather(flat, yy, xx, w):
    # flat: (N, C, H*W); yy/xx: (N, H, W)
    n_batch = yy.shape[0]
    idx = (yy * w + xx).reshape(n_batch, 1, -1)
    return np.take_along_axis(flat, np.broadcast_to(idx, (n_batch, flat.shape[1], idx.shape[2])), axis=2)


def _bwarp_forward_np(src, flow):
    n_batch, c, h, w = src.shape
    _, _, x0, y0, x1, y1, fx, fy = _bwarp_coords(flow, h, w)
    flat = src.reshape(n_batch, c, h * w)
    fx = fx.reshape(n_batch, 1, -1)
    fy = fy.reshape(n_batch, 1, -1)
    top = (1.0 - fx) * _gather(flat, y0, x0, w) + fx * _gather(flat, y0, x1, w)
    bot = (1.0 - fx) * _gather(flat, y1, x0, w) + fx * _gather(flat, y1, x1, w)
    return ((1.0 - fy) * top + fy * bot).reshape(src.shape).astype(src.dtype, copy=False)


def _scatter_add(values, yy, xx, w, shape):
    # values: (N, C, H*W) accumulated into image positions (yy, xx) of shape (N, C, H, W)
    n_batch, c, h, wd = shape
    idx = (yy * w + xx).reshape(n_batch, 1, -1)
    base = (np.arange(n_batch * c) * (h * wd)).reshape(n_batch, c, 1)
    flat_idx = (base + idx).ravel()
    acc = np.bincount(flat_idx, weights=values.ravel(), minlength=n_batch * c * h * wd)
    return acc.reshape(shape)


def _bwarp_backward_np(src, flow, g):
    n_batch, c, h, w = src.shape
    gx, gy, x0, y0, x1, y1, fx, fy = _bwarp_coords(flow, h, w)
    flat = src.reshape(n_batch, c, h * w)
    gf = g.reshape(n_batch, c, h * w)
    fx_ = fx.reshape(n_batch, 1, -1)
    fy_ = fy.reshape(n_batch, 1, -1)
    v00 = _gather(flat, y0, x0, w)
    v01 = _gather(flat, y0, x1, w)
    v10 = _gather(flat, y1, x0, w)
    v11 = _gather(flat, y1, x1, w)
    gsrc = (
        _scatter_add(gf * (1.0 - fy_) * (1.0 - fx_), y0, x0, w, src.shape)
        + _scatter_add(gf * (1.0 - fy_) * fx_, y0, x1, w, src.shape)
        + _scatter_add(gf * fy_ * (1.0 - fx_), y1, x0, w, src.shape)
        + _scatter_add(gf * fy_ * fx_, y1, x1, w, src.shape)
    )
    dsx = (gf * ((1.0 - fy_) * (v01 - v00) + fy_ * (v11 - v10))).sum(axis=1).reshape(n_batch, h, w)
    dsy = (gf * ((1.0 - fx_) * (v10 - v00) + fx_ * (v11 - v01))).sum(axis=1).reshape(n_batch, h, w)
    gflow = np.zeros_like(flow)
    gflow[:, 0] = np.where((gx >= 0.0) & (gx <= w - 1.0), dsx, 0.0)
    gflow[:, 1] = np.where((gy >= 0.0) & (gy <= h - 1.0), dsy, 0.0)
    return gsrc.astype(src.dtype, copy=False), gflow


def bwarp_forward(src, flow):
    if _backend == "numba":
        return _bwarp_forward_nb(np.ascontiguousarray(src), np.ascontiguousarray(flow))
    return _bwarp_forward_np(src, flow)


def bwarp_backward(src, flow, g):
    if _backend == "numba":
        return _bwarp_backward_nb(
            np.ascontiguousarray(src), np.ascontiguousarray(flow), np.ascontiguousarray(g)
        )
    return _bwarp_backward_np(src, flow, g)


# ---------------------------------------------------------------------------
# average splatting: bilinear scatter of value and unit weight, then divide
# ---------------------------------------------------------------------------


@njit(cache=True)
def _splat_accumulate_nb(src, flow):
    n_batch, c, h, w = src.shape
    num = np.zeros_like(src)
    den = np.zeros((n_batch, h, w), dtype=src.dtype)
    for n in range(n_batch):
        for y in range(h):
            for x in range(w):
                tx = x + flow[n, 0, y, x]
                ty = y + flow[n, 1, y, x]
                x0 = int(math.floor(tx))
                y0 = int(math.floor(ty))
                fx = tx - x0
                fy = ty - y0
                for oy in range(2):
                    qy = y0 + oy
                    if qy < 0 or qy >= h:
                        continue
                    wy = fy if oy == 1 else 1.0 - fy
                    for ox in range(2):
                        qx = x0 + ox
                        if qx < 0 or qx >= w:
                            continue
                        wgt = (fx if ox == 1 else 1.0 - fx) * wy
                        den[n, qy, qx] += wgt
                        for ch in range(c):
                            num[n, ch, qy, qx] += wgt * src[n, ch, y, x]
    return num, den


@njit(cache=True)
def _splat_backward_nb(src, flow, gnum, gden):
    n_batch, c, h, w = src.shape
    gsrc = np.zeros_like(src)
    gflow = np.zeros_like(flow)
    for n in range(n_batch):
        for y in range(h):
            for x in range(w):
                tx = x + flow[n, 0, y, x]
                ty = y + flow[n, 1, y, x]
                x0 = int(math.floor(tx))
                y0 = int(math.floor(ty))
                fx = tx - x0
                fy = ty - y0
                dtx = 0.0
                dty = 0.0
                for oy in range(2):
                    qy = y0 + oy
                    if qy < 0 or qy >= h:
                        continue
                    wy = fy if oy == 1 else 1.0 - fy
                    dwy = 1.0 if oy == 1 else -1.0
                    for ox in range(2):
                        qx = x0 + ox
                        if qx < 0 or qx >= w:
                            continue
                        wx = fx if ox == 1 else 1.0 - fx
                        dwx = 1.0 if ox == 1 else -1.0
                        gw = gden[n, qy, qx]
                        for ch in range(c):
                            gq = gnum[n, ch, qy, qx]
                            gsrc[n, ch, y, x] += wx * wy * gq
                            gw += gq * src[n, ch, y, x]
                        dtx += gw * dwx * wy
                        dty += gw * wx * dwy
                gflow[n, 0, y, x] = dtx
                gflow[n, 1, y, x] = dty
    return gsrc, gflow


def _splat_corners(flow, h, w):
    tx = np.arange(w, dtype=flow.dtype)[None, None, :] + flow[:, 0]
    ty = np.arange(h, dtype=flow.dtype)[None, :, None] + flow[:, 1]
    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    fx = tx - x0
    fy = ty - y0
    for oy in (0, 1):
        for ox in (0, 1):
            qx = x0 + ox
            qy = y0 + oy
            inside = (qx >= 0) & (qx < w) & (qy >= 0) & (qy < h)
            wx = fx if ox else 1.0 - fx
            wy = fy if oy else 1.0 - fy
            dwx = 1.0 if ox else -1.0
            dwy = 1.0 if oy else -1.0
            yield np.where(inside, qy, 0), np.where(inside, qx, 0), inside, wx, wy, dwx, dwy


def _splat_accumulate_np(src, flow):
    n_batch, c, h, w = src.shape
    num = np.zeros(src.shape, dtype=np.float64)
    den = np.zeros((n_batch, 1, h, w), dtype=np.float64)
    flat = src.reshape(n_batch, c, h * w)
    for qy, qx, inside, wx, wy, _, _ in _splat_corners(flow, h, w):
        wgt = np.where(inside, wx * wy, 0.0).reshape(n_batch, 1, -1)
        den += _scatter_add(wgt, qy, qx, w, den.shape)
        num += _scatter_add(wgt * flat, qy, qx, w, src.shape)
    return num.astype(src.dtype), den[:, 0].astype(src.dtype)


def _splat_backward_np(src, flow, gnum, gden):
    n_batch, c, h, w = src.shape
    flat = src.reshape(n_batch, c, h * w)
    gnum_flat = gnum.reshape(n_batch, c, h * w)
    gden_flat = gden.reshape(n_batch, 1, h * w)
    gsrc = np.zeros_like(flat)
    dtx = np.zeros((n_batch, h * w), dtype=src.dtype)
    dty = np.zeros_like(dtx)
    for qy, qx, inside, wx, wy, dwx, dwy in _splat_corners(flow, h, w):
        gq = _gather(gnum_flat, qy, qx, w)
        gd = _gather(gden_flat, qy, qx, w)[:, 0]
        mask = inside.reshape(n_batch, -1)
        wxf = wx.reshape(n_batch, -1)
        wyf = wy.reshape(n_batch, -1)
        gsrc += np.where(mask[:, None, :], (wxf * wyf)[:, None, :] * gq, 0.0)
        gw = np.where(mask, (gq * flat).sum(axis=1) + gd, 0.0)
        dtx += gw * dwx * wyf
        dty += gw * wxf * dwy
    gflow = np.stack([dtx.reshape(n_batch, h, w), dty.reshape(n_batch, h, w)], axis=1)
    return gsrc.reshape(src.shape).astype(src.dtype, copy=False), gflow.astype(flow.dtype, copy=False)


def splat_accumulate(src, flow):
    """Return (numerator [N,C,H,W], weight [N,H,W]) of bilinear splatting."""
    if _backend == "numba":
        return _splat_accumulate_nb(np.ascontiguousarray(src), np.ascontiguousarray(flow))
    return _splat_accumulate_np(src, flow)


def splat_backward(src, flow, gnum, gden):
    """Pull gradients of the splat numerator/weight back to src and flow."""
    if _backend == "numba":
        return _splat_backward_nb(
            np.ascontiguousarray(src),
            np.ascontiguousarray(flow),
            np.ascontiguousarray(gnum),
            np.ascontiguousarray(gden),
        )
    return _splat_backward_np(src, flow, gnum, gden)
