"""Dense tensors with a reverse-mode gradient tape.

Every op is a plain function taking :class:`Tensor` values and returning a new
one. When a :class:`GradientTape` is active and any input requires a
gradient, the op appends a record holding its inputs and a closure mapping the
output gradient to input gradients. :meth:`GradientTape.gradient` replays the
records in reverse execution order.
"""

import contextlib
import threading

import numpy as np

from . import _kernels

_local = threading.local()
_dtype = np.float32
_debug = False


def default_dtype():
    return _dtype


def set_default_dtype(dtype):
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    _dtype = dtype


@contextlib.contextmanager
def fp64():
    """Switch the default dtype to float64 (gradient-check mode) inside the block."""
    prev = _dtype
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(flag):
    """In debug mode every op output is checked for NaN/Inf."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _dtype))
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)


def tensor(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=_dtype), requires_grad=requires_grad)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype))


class _Record:
    __slots__ = ("out", "inputs", "backward", "name")

    def __init__(self, out, inputs, backward, name):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.name = name


class GradientTape:
    """Ordered record of executed ops; single-threaded, one per training step.

    >>> with GradientTape() as tape:
    ...     y = sum_(square(x))
    >>> (gx,) = tape.gradient(y, [x])
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def record(self, out, inputs, backward, name):
        self.records.append(_Record(out, inputs, backward, name))

    def gradient(self, target, sources, seed=None):
        """Gradients of ``target`` w.r.t. each source (zeros if unreachable).

        Visits records in exact reverse order; a value's gradient is consumed
        only once every later op that read it has contributed.
        """
        grads = {id(target): np.ones_like(target.data) if seed is None else np.asarray(seed, dtype=target.dtype)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g.astype(s.dtype, copy=False).reshape(s.shape))
        return out


def _active_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _result(data, inputs, backward, name):
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op {name!r}")
    tape = _active_tape()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req, dtype=data.dtype)
    if req:
        tape.record(out, inputs, backward, name)
    return out


def _channel_sum(g):
    """Sum [N,C,...] over every axis but 1 (BLAS-backed; much faster than sum(axis=(0,2,3)))."""
    n, c = g.shape[:2]
    flat = g.reshape(n * c, -1)
    return (flat @ np.ones(flat.shape[1], dtype=g.dtype)).reshape(n, c).sum(axis=0)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# pointwise unary
# ---------------------------------------------------------------------------


def sigmoid(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(s.astype(x.dtype, copy=False), (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x):
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x):
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,), "relu")


def exp(x):
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,), "exp")


def log(x):
    if _debug and np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x):
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log, "square": square}


def pointwise_unary(x, kind):
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ValueError(f"unknown unary op {kind!r}") from None
    return fn(x)


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient is zero where clipping is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce(x, kind, axes=None, keepdims=False):
    axes = _norm_axes(axes, x.ndim)
    shape = x.shape
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / int(np.prod([shape[a] for a in axes]))
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale if scale != 1.0 else g, shape),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward, kind)


def sum_(x, axes=None, keepdims=False):
    return reduce(x, "sum", axes, keepdims)


def mean(x, axes=None, keepdims=False):
    return reduce(x, "mean", axes, keepdims)


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(x, shape):
    old = x.shape
    return _result(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def index_select(x, index):
    """Basic (slice/int) indexing with scatter backward."""
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[index]), (x,), backward, "index")


def split_channels(x, sizes):
    """Split along axis 1 into consecutive groups of the given sizes."""
    out, start = [], 0
    for s in sizes:
        out.append(index_select(x, (slice(None), slice(start, start + s))))
        start += s
    if start != x.shape[1]:
        raise ValueError(f"split sizes {sizes} do not cover {x.shape[1]} channels")
    return out


def softmax(x, axis=1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def matmul(a, b):
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """x [N, In] times weight [Out, In]^T plus bias [Out]."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, inputs, backward, "linear")


def upsample_nearest2x(x):
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward(g):
        return (g[:, :, 0::2, 0::2] + g[:, :, 1::2, 0::2] + g[:, :, 0::2, 1::2] + g[:, :, 1::2, 1::2],)

    return _result(out, (x,), backward, "upsample")


def stop_gradient(x):
    return Tensor(x.data, requires_grad=False, dtype=x.dtype)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _out_size(h, k, stride, padding):
    return (h + 2 * padding - k) // stride + 1


def _im2col(xp, k, stride, ho, wo):
    # xp: padded input (N, C, Hp, Wp) -> (N, C*K*K, Ho*Wo)
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = xp[:, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x, kernel, bias=None, stride=1, padding=0, impl="im2col"):
    """Cross-correlation of x [N,Cin,H,W] with kernel [Cout,Cin,K,K].

    ``impl="direct"`` runs the nested-loop kernel; ``"im2col"`` lowers to one
    matrix product. Both share the same backward.
    """
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: output size {ho}x{wo} < 1 for input {h}x{w}, K={k}, padding={padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    wmat = kernel.data.reshape(cout, cin * k * k)
    if k == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, cin, h * w)
        out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    elif impl == "direct":
        cols = None
        out = _kernels.conv2d_direct(x.data, kernel.data, stride, padding)
    elif impl == "im2col":
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, k, stride, ho, wo)
        out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    else:
        raise ValueError(f"unknown conv impl {impl!r}")
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    xd = x.data

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gk = gb = None
        if kernel.requires_grad:
            c = cols
            if c is None:
                xp_ = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
                c = _im2col(xp_, k, stride, ho, wo)
            gk = np.tensordot(g2, c, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)
            if k == 1 and stride == 1 and padding == 0:
                gx = dcols.reshape(xd.shape)
            else:
                dcols = dcols.reshape(n, cin, k, k, ho, wo)
                gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
                for ky in range(k):
                    for kx in range(k):
                        gxp[:, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride] += dcols[:, :, ky, kx]
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if bias is not None and bias.requires_grad:
            gb = _channel_sum(g)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result(out.astype(xd.dtype, copy=False), inputs, backward, "conv2d")


def depthwise_conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Per-channel K x K convolution; kernel [C,1,K,K]."""
    n, c, h, w = x.shape
    if kernel.shape[0] != c or kernel.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d: kernel shape {kernel.shape} does not match {c} input channels")
    k = kernel.shape[2]
    if k % 2 == 0 or kernel.shape[3] != k:
        raise ValueError("depthwise_conv2d: kernel must be square with odd size")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"depthwise_conv2d: output size {ho}x{wo} < 1")
    kd = kernel.data.reshape(c, k, k)
    out = _kernels.depthwise_forward(x.data, kd, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    xd = x.data

    def backward(g):
        gx, gk = _kernels.depthwise_backward(xd, kd, g, stride, padding)
        gk = gk.reshape(kernel.shape)
        if bias is not None:
            return gx, gk, _channel_sum(g)
        return gx, gk

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result(out.astype(xd.dtype, copy=False), inputs, backward, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# fused blocks (one tape record each)
# ---------------------------------------------------------------------------


def _sig(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def se_scale(x, reduce_w, reduce_b, expand_w, expand_b):
    """x * sigmoid(W2 relu(W1 avgpool(x) + b1) + b2), channelwise."""
    xd = x.data
    n, c = xd.shape[:2]
    hw = xd.shape[2] * xd.shape[3]
    pooled = xd.reshape(n, c, hw).mean(axis=2)
    pre = pooled @ reduce_w.data.T + reduce_b.data
    act = np.maximum(pre, 0)
    s = _sig(act @ expand_w.data.T + expand_b.data).astype(xd.dtype, copy=False)
    out = xd * s[:, :, None, None]

    def backward(g):
        gs = (g * xd).reshape(n, c, hw) @ np.ones(hw, dtype=xd.dtype)
        gx = g * s[:, :, None, None]
        gz = gs * s * (1.0 - s)
        gw2 = gz.T @ act
        gb2 = gz.sum(axis=0)
        gact = gz @ expand_w.data
        gpre = gact * (pre > 0)
        gw1 = gpre.T @ pooled
        gb1 = gpre.sum(axis=0)
        gpool = gpre @ reduce_w.data
        gx = gx + (gpool / hw)[:, :, None, None]
        return gx, gw1, gb1, gw2, gb2

    return _result(out, (x, reduce_w, reduce_b, expand_w, expand_b), backward, "se_scale")


def lstm_cell(gates, cell):
    """LSTM pointwise update from pre-activation gates [N,4C,...] (order i,f,g,o).

    Returns hidden and new cell stacked on axis 1: [N,2C,...].
    """
    gd, cd = gates.data, cell.data
    ch = cd.shape[1]
    i = _sig(gd[:, :ch])
    f = _sig(gd[:, ch : 2 * ch])
    gg = np.tanh(gd[:, 2 * ch : 3 * ch])
    o = _sig(gd[:, 3 * ch :])
    c_new = f * cd + i * gg
    tc = np.tanh(c_new)
    h = o * tc
    out = np.concatenate([h, c_new], axis=1).astype(cd.dtype, copy=False)

    def backward(g):
        gh, gc = g[:, :ch], g[:, ch:]
        gc = gc + gh * o * (1.0 - tc * tc)
        ggates = np.concatenate(
            [
                gc * gg * i * (1.0 - i),
                gc * cd * f * (1.0 - f),
                gc * i * (1.0 - gg * gg),
                gh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        return ggates, gc * f

    return _result(out, (gates, cell), backward, "lstm_cell")


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


def grad_check(f, point, step=1e-5, indices=None):
    """Max relative error between tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Relative error per element is
    |a - n| / max(|a|, |n|, 1e-8). ``indices`` restricts the probed flat
    positions (all by default).
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with fp64():
        x = Tensor(x0.copy(), requires_grad=True)
        with GradientTape() as tape:
            y = f(x)
        if y.data.size != 1:
            raise ValueError("grad_check: f must return a scalar")
        (analytic,) = tape.gradient(y, [x])
        analytic = analytic.ravel()
        probe = range(x0.size) if indices is None else indices
        worst = 0.0
        flat = x0.ravel()
        for i in probe:
            vals = []
            for sgn in (1.0, -1.0):
                xp = flat.copy()
                xp[i] += sgn * step
                v = float(f(Tensor(xp.reshape(x0.shape))).data)
                if not np.isfinite(v):
                    raise FloatingPointError(f"grad_check: non-finite f at probe {i}")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
