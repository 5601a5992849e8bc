"""
metrics.py
----------
Image similarity (MSE/PSNR, SSIM) and segmentation overlap (Dice, IoU).
"""

import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy import ndimage

from errors import ContractError
from imagecore import BORDER_MODE

PSNR_PEAK = 1.0

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5   # 11x11 window
SSIM_MIN_SIDE = 2 * SSIM_RADIUS + 1
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

TISSUE_CLASSES = (1, 2, 3)
CLASS_NAMES = {1: "csf", 2: "gm", 3: "wm"}


@dataclass(frozen=True)
class OverlapReport:
    per_class: Dict[int, Tuple[float, float]]
    macro_dice: float
    macro_iou: float


def _pair(a, b, min_side: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < min_side:
        raise ContractError(f"need 2D images at least {min_side}x{min_side}, got {a.shape}")
    return a, b


def mse_psnr(a, b) -> Tuple[float, float]:
    """MSE and PSNR (peak 1.0); identical images give PSNR = inf."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 0.0, math.inf
    return mse, 10.0 * math.log10(PSNR_PEAK ** 2 / mse)


def _window(x: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(x, sigma=SSIM_SIGMA, mode=BORDER_MODE, radius=SSIM_RADIUS)


def ssim(a, b) -> float:
    """
    Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and mirror borders,
    dynamic range 1.0.
    """
    a, b = _pair(a, b, SSIM_MIN_SIDE)

    mu_a = _window(a)
    mu_b = _window(b)
    # The cross term is computed the same way as the variances, so that
    # ssim(a, a) is exactly 1
    var_a = _window(a * a) - mu_a * mu_a
    var_b = _window(b * b) - mu_b * mu_b
    cov = _window(a * b) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def overlap(pred, truth) -> OverlapReport:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"dimension mismatch: {pred.shape} vs {truth.shape}")

    per_class = {}
    for c in TISSUE_CLASSES:
        p = pred == c
        t = truth == c
        inter = int(np.count_nonzero(p & t))
        size_p = int(np.count_nonzero(p))
        size_t = int(np.count_nonzero(t))
        if size_p + size_t == 0:
            per_class[c] = (1.0, 1.0)
            continue
        union = size_p + size_t - inter
        per_class[c] = (2.0 * inter / (size_p + size_t), inter / union)

    dices = [per_class[c][0] for c in TISSUE_CLASSES]
    ious = [per_class[c][1] for c in TISSUE_CLASSES]
    return OverlapReport(per_class, float(np.mean(dices)), float(np.mean(ious)))


def macro_dice(pred, truth) -> float:
    return overlap(pred, truth).macro_dice
