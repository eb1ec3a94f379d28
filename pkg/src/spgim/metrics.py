"""Matting error measures: SAD, MSE, gradient error and connectivity error.

All inputs are alpha planes in [0, 1]. ``region`` is an optional boolean mask
(e.g. the unknown band of a trimap); ``None`` scores the whole image.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_MIN_DIFF = 0.15


@dataclass
class MetricReport:
    sad: float
    mse: float
    grad: float
    conn: float
    region: str = "whole-image"

    def as_dict(self):
        return asdict(self)


def _prepare(pred, gt, region):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim != 2:
        raise ValueError(f"expected 2-D mattes, got {pred.ndim}-D")
    if region is None:
        region = np.ones(pred.shape, dtype=bool)
    else:
        region = np.asarray(region, dtype=bool)
        if region.shape != pred.shape:
            raise ValueError(f"region {region.shape} does not match matte {pred.shape}")
    return pred, gt, region


def sad(pred, gt, region=None):
    """Sum of absolute differences, reported in thousands."""
    pred, gt, region = _prepare(pred, gt, region)
    # fsum is correctly rounded, so the value does not depend on summation order
    return math.fsum(np.abs(pred - gt)[region]) / 1000.0


def mse(pred, gt, region=None):
    pred, gt, region = _prepare(pred, gt, region)
    n = int(region.sum())
    if n == 0:
        raise ValueError("empty evaluation region")
    return math.fsum(((pred - gt) ** 2)[region]) / n


def gaussian_derivative_kernel(sigma):
    """x-derivative of a 2-D Gaussian, L2-normalised; support cut where it falls below 1e-2."""
    eps = 1e-2
    half = int(np.ceil(sigma * np.sqrt(-2.0 * np.log(np.sqrt(2.0 * np.pi) * sigma * eps))))
    u = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-u ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))
    dg = -u * g / sigma ** 2
    hx = np.outer(g, dg)
    return hx / np.sqrt((hx ** 2).sum())


def gradient_magnitude(plane, sigma=GRAD_SIGMA):
    hx = gaussian_derivative_kernel(sigma)
    gx = ndimage.convolve(plane, hx, mode="nearest")
    gy = ndimage.convolve(plane, hx.T, mode="nearest")
    return np.sqrt(gx ** 2 + gy ** 2)


def grad(pred, gt, sigma=GRAD_SIGMA, region=None):
    """Squared difference of Gaussian-derivative gradient magnitudes, scaled by 1e-3."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pred, gt, region = _prepare(pred, gt, region)
    support = gaussian_derivative_kernel(sigma).shape[0]
    if min(pred.shape) < support:
        raise ValueError(f"matte {pred.shape} smaller than filter support {support}x{support}")
    err = (gradient_magnitude(pred, sigma) - gradient_magnitude(gt, sigma)) ** 2
    return float(err[region].sum()) / 1000.0


def largest_component(mask):
    """Largest 4-connected foreground component; all-False if the mask is empty."""
    labels, n = ndimage.label(mask)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def connectivity_levels(pred, gt, step=CONN_STEP):
    """Per-pixel threshold at which each pixel leaves the shared largest component."""
    thresholds = np.arange(0.0, 1.0 + step, step)
    level = np.full(pred.shape, -1.0)
    for i in range(1, len(thresholds)):
        omega = largest_component((pred >= thresholds[i]) & (gt >= thresholds[i]))
        level[(level == -1) & ~omega] = thresholds[i - 1]
    level[level == -1] = 1.0
    return level


def conn(pred, gt, step=CONN_STEP, region=None):
    """Connectivity error, scaled by 1e-3."""
    if not 0.0 < step < 1.0:
        raise ValueError(f"step must be in (0, 1), got {step}")
    pred, gt, region = _prepare(pred, gt, region)
    level = connectivity_levels(pred, gt, step)
    d_pred, d_gt = pred - level, gt - level
    phi_pred = 1.0 - d_pred * (d_pred >= CONN_MIN_DIFF)
    phi_gt = 1.0 - d_gt * (d_gt >= CONN_MIN_DIFF)
    return float(np.abs(phi_pred - phi_gt)[region].sum()) / 1000.0


def evaluate(pred, gt, region=None, sigma=GRAD_SIGMA, step=CONN_STEP):
    return MetricReport(
        sad=sad(pred, gt, region),
        mse=mse(pred, gt, region),
        grad=grad(pred, gt, sigma, region),
        conn=conn(pred, gt, step, region),
        region="whole-image" if region is None else "unknown-only",
    )
