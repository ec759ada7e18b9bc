"""Image-quality metrics: PSNR, SSIM and the scaled perceptual score."""

from __future__ import annotations

import numpy as np
import torch
from skimage.metrics import structural_similarity

from .losses import perceptual_loss

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """-10 log10(MSE) on [0, 1] images, capped at 99 dB for identical inputs."""
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Gaussian-window SSIM (sigma 1.5, 11x11, K1=0.01, K2=0.03) averaged over channels."""
    return float(
        structural_similarity(
            np.asarray(pred, np.float64),
            np.asarray(target, np.float64),
            data_range=1.0,
            channel_axis=-1,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def lpips_star(pred: np.ndarray, target: np.ndarray, backend: str = "builtin") -> float:
    """Perceptual distance of the configured backend, multiplied by 1000."""
    with torch.no_grad():
        d = perceptual_loss(torch.as_tensor(np.asarray(pred, np.float32)), torch.as_tensor(np.asarray(target, np.float32)), backend)
    return float(d) * 1e3


def image_metrics(pred: np.ndarray, target: np.ndarray, backend: str = "builtin") -> dict[str, float]:
    return {"psnr": psnr(pred, target), "ssim": ssim(pred, target), "lpips_star": lpips_star(pred, target, backend)}
