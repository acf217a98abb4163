"""Image quality metrics for reconstructed slices.

All metrics take 2-D arrays in the same normalized units.  PSNR and SSIM use
the full normalized dynamic range (2.0 for images mapped to [-1, 1]) unless
told otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # valid-mode weighted local mean; keeps the statistics free of border bias
    k = window.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", view, window)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Mean structural similarity over an 11x11 Gaussian-weighted window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"need a 2-D image of side >= {SSIM_WINDOW}, got {a.shape}")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _windowed_mean(a, w)
    mu_b = _windowed_mean(b, w)
    var_a = _windowed_mean(a * a, w) - mu_a * mu_a
    var_b = _windowed_mean(b * b, w) - mu_b * mu_b
    cov = _windowed_mean(a * b, w) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    """Per-image metric rows plus their plain means."""

    per_image: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    @classmethod
    def compute(cls, preds, gts, ids=None, data_range: float = 2.0) -> "MetricsReport":
        if len(preds) != len(gts):
            raise ValueError("prediction and ground-truth counts differ")
        rows = []
        for i, (p, g) in enumerate(zip(preds, gts)):
            rows.append(
                {
                    "id": ids[i] if ids is not None else str(i),
                    "rmse": rmse(p, g),
                    "ssim": ssim(p, g),
                    "psnr": psnr(p, g, data_range),
                }
            )
        agg = {}
        if rows:
            for key in ("rmse", "ssim", "psnr"):
                agg[key] = float(np.mean([r[key] for r in rows]))
        return cls(per_image=rows, aggregate=agg)
