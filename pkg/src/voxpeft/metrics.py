"""Volume reconstruction quality metrics: PSNR, SSIM, NRMSE.

All three take plain float64 numpy volumes of identical shape. Intensities
are assumed to live in [0, 1] (dynamic range 1) unless overridden.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, VoxpeftError


@dataclass
class MetricReport:
    """Mean metrics over a sample set; psnr is math.inf for exact matches."""

    psnr: float
    ssim: float
    nrmse: float
    n_samples: int

    def as_dict(self):
        return {"psnr": self.psnr, "ssim": self.ssim, "nrmse": self.nrmse, "n_samples": self.n_samples}


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"metric inputs disagree in shape: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt, max_val=1.0):
    """Peak signal-to-noise ratio in dB; returns inf when the volumes match."""
    pred, gt = _check_pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim3d(pred, gt, window=7, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Mean structural similarity over all valid 3D windows (uniform weights).

    Window statistics use population moments: var = E[x^2] - E[x]^2 over the
    window, matching a naive per-window rescan.
    """
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 3:
        raise DimensionError(f"ssim3d expects 3-d volumes, got {pred.shape}")
    if min(pred.shape) < window:
        raise DimensionError(f"volume {pred.shape} is smaller than the {window}^3 ssim window")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    win = (window, window, window)
    axes = (-3, -2, -1)
    mu1 = sliding_window_view(pred, win).mean(axis=axes)
    mu2 = sliding_window_view(gt, win).mean(axis=axes)
    m11 = sliding_window_view(pred * pred, win).mean(axis=axes)
    m22 = sliding_window_view(gt * gt, win).mean(axis=axes)
    m12 = sliding_window_view(pred * gt, win).mean(axis=axes)
    var1 = m11 - mu1 * mu1
    var2 = m22 - mu2 * mu2
    cov = m12 - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)
    return float(np.mean(num / den))


def nrmse(pred, gt):
    """Root mean squared error normalized by the ground-truth intensity range.

    Not symmetric: the denominator comes from gt, so nrmse(a, b) != nrmse(b, a)
    in general.
    """
    pred, gt = _check_pair(pred, gt)
    span = float(gt.max() - gt.min())
    if span == 0.0:
        raise VoxpeftError("nrmse is undefined for a constant ground-truth volume")
    return float(np.sqrt(np.mean((pred - gt) ** 2)) / span)
