#!/usr/bin/env python3

"""Image quality metrics: PSNR, luminance SSIM and mask IoU"""

import math
from dataclasses import dataclass

import cv2
import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    iou: float = None

    def to_dict(self):
        result = {'psnr_db': 'inf' if math.isinf(self.psnr_db) else self.psnr_db, 'ssim': self.ssim}
        if self.iou is not None:
            result['iou'] = self.iou
        return result


def _check_shapes(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    a, b = _check_shapes(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def luminance(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ LUMA_WEIGHTS
    if image.ndim == 2:
        return image
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {image.shape}")


def ssim(a, b):
    """Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows of the luminance"""
    a, b = _check_shapes(a, b)
    x, y = luminance(a), luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")

    def blur(img):
        return cv2.GaussianBlur(img, (SSIM_WINDOW, SSIM_WINDOW), SSIM_SIGMA)[5:-5, 5:-5]

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x ** 2
    var_y = blur(y * y) - mu_y ** 2
    cov = blur(x * y) - mu_x * mu_y
    score = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / \
            ((mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2))
    return float(score.mean())


def mask_iou(a, b):
    """Intersection over union of masks thresholded at 0.5; two empty masks score 1"""
    a, b = _check_shapes(a, b)
    a, b = a >= 0.5, b >= 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
