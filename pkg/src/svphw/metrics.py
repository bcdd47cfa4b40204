"""PSNR and SSIM for frames in [0, 1], and per-step evaluation reports."""

from dataclasses import dataclass

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_chw(x):
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim != 3:
        raise ValueError(f"expected a [C,H,W] or [H,W] frame, got shape {x.shape}")
    return x


def psnr(a, b):
    """10*log10(1/MSE) in dB with data range 1; capped at 100 dB."""
    a, b = np.asarray(getattr(a, "data", a), np.float64), np.asarray(getattr(b, "data", b), np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x, taps):
    # separable valid-mode correlation over the last two axes
    k = len(taps)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ taps


def ssim_map(a, b):
    """Per-pixel SSIM over the valid region, one map per channel."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"ssim: frame {a.shape[1:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    taps = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a**2
    var_b = _filter_valid(b * b, taps) - mu_b**2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b):
    """Mean single-scale SSIM, averaged over channels."""
    return float(np.mean(ssim_map(a, b).mean(axis=(1, 2))))


@dataclass
class MetricReport:
    """Scores of sampled predictions against ground truth.

    ``psnr`` and ``ssim`` have shape [sequences, samples, steps].
    """

    psnr: np.ndarray
    ssim: np.ndarray

    @classmethod
    def from_predictions(cls, truths, predictions):
        """``truths[s]`` is [T,C,H,W]; ``predictions[s]`` is [samples,T,C,H,W]."""
        p, s = [], []
        for truth, preds in zip(truths, predictions):
            p.append([[psnr(f, t) for f, t in zip(pred, truth)] for pred in preds])
            s.append([[ssim(f, t) for f, t in zip(pred, truth)] for pred in preds])
        return cls(np.array(p, dtype=np.float64), np.array(s, dtype=np.float64))

    @property
    def samples(self):
        return self.psnr.shape[1]

    def mean_per_step(self, metric):
        """Mean over sequences and samples -> [steps]."""
        return getattr(self, metric).mean(axis=(0, 1))

    def best_of_n(self, metric):
        """Per sequence, the sample with the best step-averaged score -> [sequences, steps]."""
        values = getattr(self, metric)
        best = values.mean(axis=2).argmax(axis=1)
        return values[np.arange(values.shape[0]), best]

    def summary(self):
        out = {
            "sequences": self.psnr.shape[0],
            "samples": self.samples,
            "steps": self.psnr.shape[2],
            "psnr_mean": float(self.psnr.mean()),
            "ssim_mean": float(self.ssim.mean()),
        }
        if self.samples > 1:
            out["psnr_best_of_n"] = float(self.best_of_n("psnr").mean())
            out["ssim_best_of_n"] = float(self.best_of_n("ssim").mean())
        return out

    def step_table(self):
        """Tab-separated per-step means (and best-of-N columns when sampled)."""
        cols = ["step", "psnr", "ssim"]
        rows = [self.mean_per_step("psnr"), self.mean_per_step("ssim")]
        if self.samples > 1:
            cols += ["psnr_best", "ssim_best"]
            rows += [self.best_of_n("psnr").mean(axis=0), self.best_of_n("ssim").mean(axis=0)]
        lines = ["\t".join(cols)]
        for i in range(self.psnr.shape[2]):
            lines.append("\t".join([str(i + 1)] + [repr(float(r[i])) for r in rows]))
        return "\n".join(lines) + "\n"

    def sequence_table(self):
        lines = ["sequence\tsample\tstep\tpsnr\tssim"]
        for s in range(self.psnr.shape[0]):
            for n in range(self.samples):
                for t in range(self.psnr.shape[2]):
                    lines.append(f"{s}\t{n}\t{t + 1}\t{float(self.psnr[s, n, t])!r}\t{float(self.ssim[s, n, t])!r}")
        return "\n".join(lines) + "\n"
