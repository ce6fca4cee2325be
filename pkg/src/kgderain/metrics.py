"""Full-reference image quality metrics: PSNR, SSIM, UIQI and GMSD.

PSNR uses the mean squared error over all RGB channels. The windowed
metrics work on luma. All inputs are expected in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import imgcore

PSNR_IDENTICAL = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
UIQI_WINDOW = 8
GMSD_C = 0.0026
_TINY = 1e-12

PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
PREWITT_Y = PREWITT_X.T.copy()


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    uiqi: float
    gmsd: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[float]:
        return list(astuple(self))


def _pair(x, y):
    x = imgcore.as_image(x)
    y = imgcore.as_image(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y) -> float:
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def _filter_valid(a: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with the outer product of ``k1d`` with itself."""
    n = k1d.size
    rows = sliding_window_view(a, n, axis=1) @ k1d
    return sliding_window_view(rows, n, axis=0) @ k1d


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim(x, y, data_range: float = 1.0) -> float:
    x, y = _pair(x, y)
    a = imgcore.luminance(x)
    b = imgcore.luminance(y)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _uiqi_window(var_a, var_b, cov, mu_a, mu_b, same):
    """Quality index for one set of window statistics (arrays broadcast)."""
    var_term = var_a + var_b
    mean_term = mu_a**2 + mu_b**2
    small_v = var_term < _TINY
    small_m = mean_term < _TINY
    safe = ~(small_v | small_m)
    q = np.zeros(np.broadcast(var_a, mean_term).shape)
    q[safe] = (4.0 * cov * mu_a * mu_b)[safe] / (var_term * mean_term)[safe]
    # Degenerate windows: identical windows score 1, everything else 0.
    q[~safe] = np.where(same[~safe], 1.0, 0.0)
    return q


def uiqi(x, y) -> float:
    x, y = _pair(x, y)
    a = imgcore.luminance(x)
    b = imgcore.luminance(y)
    n = UIQI_WINDOW
    if min(a.shape) < n:
        raise ValueError(f"UIQI needs at least {n}x{n} pixels")
    box = np.full(n, 1.0 / n)
    mu_a = _filter_valid(a, box)
    mu_b = _filter_valid(b, box)
    var_a = np.maximum(_filter_valid(a * a, box) - mu_a**2, 0.0)
    var_b = np.maximum(_filter_valid(b * b, box) - mu_b**2, 0.0)
    cov = _filter_valid(a * b, box) - mu_a * mu_b
    diff = sliding_window_view(np.abs(a - b), (n, n)).max(axis=(2, 3))
    return float(np.mean(_uiqi_window(var_a, var_b, cov, mu_a, mu_b, diff == 0.0)))


def gradient_magnitude(a: np.ndarray) -> np.ndarray:
    win = sliding_window_view(a, (3, 3))
    gx = np.einsum("ijkl,kl->ij", win, PREWITT_X)
    gy = np.einsum("ijkl,kl->ij", win, PREWITT_Y)
    return np.sqrt(gx**2 + gy**2)


def gmsd(x, y, c: float = GMSD_C) -> float:
    x, y = _pair(x, y)
    a = imgcore.luminance(x)
    b = imgcore.luminance(y)
    if min(a.shape) < 3:
        raise ValueError("GMSD needs at least 3x3 pixels")
    ga = gradient_magnitude(a)
    gb = gradient_magnitude(b)
    gms = (2.0 * ga * gb + c) / (ga**2 + gb**2 + c)
    return float(np.std(gms))


def evaluate(x, y) -> MetricReport:
    return MetricReport(psnr(x, y), ssim(x, y), uiqi(x, y), gmsd(x, y))


def evaluate_protocol(derained_path, reference_path) -> MetricReport:
    """Metrics between two PNG files, i.e. after 8-bit quantisation of both."""
    return evaluate(imgcore.load_png(derained_path), imgcore.load_png(reference_path))


def average(reports) -> MetricReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    arr = np.array([r.row() for r in reports])
    return MetricReport(*(float(v) for v in arr.mean(axis=0)))
