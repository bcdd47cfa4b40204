import numpy as np
import pytest

from svphw import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.fp64():
        yield


def naive_conv2d(x, w, b=None, stride=1, pad=0):
    """Six nested loops; x [N,Cin,H,W], w [Cout,Cin,K,K]."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[i, c, y * stride + ky, xx * stride + kx] * w[o, c, ky, kx]
                    out[i, o, y, xx] = acc + (b[o] if b is not None else 0.0)
    return out


def naive_depthwise(x, w, stride=1, pad=0):
    """w [C,K,K]."""
    n, c, h, wd = x.shape
    out = [naive_conv2d(x[:, ch : ch + 1], w[ch][None, None], None, stride, pad) for ch in range(c)]
    return np.concatenate(out, axis=1)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
