"""Slice preprocessing: center crop, bilinear resize, affine normalization.

The normalization maps raw reconstruction units onto [-1, 1] through a single
per-dataset scale (the global maximum of the target reconstructions), so the
corrected and uncorrected images of a pair share one affine map.
"""

from __future__ import annotations

import numpy as np


def center_crop(img: np.ndarray, roi: int) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape
    if roi > min(h, w):
        raise ValueError(f"crop {roi} exceeds image side {img.shape}")
    i0 = (h - roi) // 2
    j0 = (w - roi) // 2
    return img[i0 : i0 + roi, j0 : j0 + roi]


def resize_bilinear(img: np.ndarray, target: int) -> np.ndarray:
    """Resize a square image with half-pixel-center sample alignment."""
    img = np.asarray(img, dtype=np.float64)
    src = img.shape[0]
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"expected a square image, got {img.shape}")
    if target == src:
        return img.copy()
    scale = src / target
    coords = (np.arange(target, dtype=np.float64) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0.0, src - 1.0)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    f = coords - i0
    lo = img[i0][:, i0] * (1.0 - f[None, :]) + img[i0][:, i1] * f[None, :]
    hi = img[i1][:, i0] * (1.0 - f[None, :]) + img[i1][:, i1] * f[None, :]
    return lo * (1.0 - f[:, None]) + hi * f[:, None]


def normalize(img: np.ndarray, vmax: float) -> np.ndarray:
    """Affine map [0, vmax] -> [-1, 1]; values above vmax pass through linearly."""
    if vmax <= 0:
        raise ValueError(f"normalization scale must be positive, got {vmax}")
    return 2.0 * np.asarray(img, dtype=np.float64) / vmax - 1.0


def denormalize(img: np.ndarray, vmax: float) -> np.ndarray:
    if vmax <= 0:
        raise ValueError(f"normalization scale must be positive, got {vmax}")
    return (np.asarray(img, dtype=np.float64) + 1.0) * vmax / 2.0


def preprocess(img: np.ndarray, roi: int, target: int, vmax: float) -> np.ndarray:
    return normalize(resize_bilinear(center_crop(img, roi), target), vmax)
