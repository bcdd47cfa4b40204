"""Slow, independent reference implementations used as test oracles."""

import math

import numpy as np


def ssim_direct(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Window-by-window SSIM of 2-D frames with an explicit 2-D Gaussian window."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    r = [i - (size - 1) / 2 for i in range(size)]
    win = np.array([[math.exp(-(y * y + x * x) / (2 * sigma * sigma)) for x in r] for y in r])
    win /= win.sum()
    c1, c2 = k1 * k1, k2 * k2
    h, w = a.shape
    vals = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            pa, pb = a[y : y + size, x : x + size], b[y : y + size, x : x + size]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def psnr_direct(a, b):
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1 / mse))
