"""Image quality metrics: PSNR, SSIM and aggregation over result sets.

Images are on a [0, 1] scale, shaped ``(H, W)`` or ``(H, W, C)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from gendeblur.errors import ShapeError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """``10 log10(1 / MSE)`` over all pixels and channels; ``inf`` when identical."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def to_gray(img):
    """Luma for 3-channel images; single-channel input is squeezed."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    raise ShapeError(f"expected (H,W), (H,W,1) or (H,W,3) image, got {img.shape}")


def gaussian_window_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable Gaussian filter keeping only windows fully inside ``img``."""
    half = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim_map(a, b, data_range=1.0):
    """Local SSIM at every valid window position."""
    a, b = _pair(to_gray(a), to_gray(b))
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape}")
    g = gaussian_window_1d()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03).

    Colour inputs are converted to luma first.  Identical inputs return
    exactly 1.0.
    """
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        to_gray(a)
        if min(a.shape[:2]) < SSIM_WINDOW:
            raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape}")
        return 1.0
    return float(np.mean(ssim_map(a, b, data_range)))


@dataclass(frozen=True)
class MetricReport:
    """PSNR/SSIM/MSE of an estimate against ground truth.

    ``psnr_db`` may be ``inf``; :meth:`to_json` writes it as ``PSNR_CAP``.
    """

    psnr_db: float
    ssim: float
    mse: float
    range_error: float | None = None

    def to_json(self):
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = PSNR_CAP
        return d


def evaluate(estimate, truth, range_error=None):
    est = np.clip(np.asarray(estimate, dtype=np.float64), 0.0, 1.0)
    return MetricReport(psnr(est, truth), ssim(est, truth), mse(est, truth), range_error)


def range_error(i_test, i_range):
    """``||i_test - i_range||`` (Euclidean norm over all pixels)."""
    a, b = _pair(i_test, i_range)
    return float(np.linalg.norm((a - b).ravel()))


@dataclass(frozen=True)
class Summary:
    mean_psnr: float
    mean_ssim: float
    count: int
    n_infinite: int


def aggregate(reports):
    """Arithmetic means; infinite PSNRs are left out of the PSNR mean and counted."""
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate needs at least one report")
    finite = [r.psnr_db for r in reports if not math.isinf(r.psnr_db)]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    return Summary(mean_psnr, float(np.mean([r.ssim for r in reports])), len(reports),
                   len(reports) - len(finite))
