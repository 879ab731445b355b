"""Image-space evaluation metrics."""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgument

PSNR_CAP = 99.0


def psnr(a, b, peak: float = 1.0, mask=None) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    err = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask) > 0
        if m.shape != a.shape[:2]:
            raise InvalidArgument("mask must match the image lattice")
        err = err[m]
        if err.size == 0:
            raise InvalidArgument("empty mask")
    mse = float(err.mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def seam_score(pano) -> float:
    """Excess of the wrap-column step over the steepest interior step, worst row.

    Per row, the absolute difference between the last and first column
    (channel mean) is compared with the largest absolute difference between
    any two adjacent interior columns; the score is the largest positive
    excess. Images that tile horizontally with a period dividing the width
    score 0.
    """
    img = np.asarray(pano, np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    if img.ndim != 2 or img.shape[1] < 3:
        raise InvalidArgument("seam score needs an (H, W>=3) image")
    wrap = np.abs(img[:, 0] - img[:, -1])
    inner = np.abs(np.diff(img, axis=1)).max(axis=1)
    return float(np.maximum(wrap - inner, 0.0).max())
