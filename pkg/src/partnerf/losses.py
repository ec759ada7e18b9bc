"""Training objective: pixel MSE, a pluggable perceptual term and the consistency hinge."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ConfigError
from .deform import DeformationResidual

PERCEPTUAL_BACKENDS = ("builtin", "lpips")
_CHARBONNIER_EPS = 1e-3


class PerceptualBackendUnavailable(RuntimeError):
    """The requested perceptual backend cannot run here; there is no silent fallback."""


@dataclass
class LossWeights:
    lambda_m: float = 1.0
    lambda_p: float = 1.0
    lambda_c: float = 1.0

    def __post_init__(self):
        if min(self.lambda_m, self.lambda_p, self.lambda_c) < 0:
            raise ConfigError("loss weights must be nonnegative")


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def _as_nchw(img: torch.Tensor) -> torch.Tensor:
    # accepts (H, W, 3), (N, H, W, 3) or (N, 3, H, W)
    if img.dim() == 3:
        img = img.unsqueeze(0)
    if img.shape[-1] == 3 and img.shape[1] != 3:
        img = img.permute(0, 3, 1, 2)
    return img


def _gradient_magnitude(img: torch.Tensor) -> torch.Tensor:
    gx = img[..., :, 1:] - img[..., :, :-1]
    gy = img[..., 1:, :] - img[..., :-1, :]
    return torch.sqrt(gx[..., :-1, :] ** 2 + gy[..., :, :-1] ** 2 + 1e-8)


def _local_contrast(img: torch.Tensor, size: int = 3) -> torch.Tensor:
    mean = F.avg_pool2d(img, size, stride=1)
    sq = F.avg_pool2d(img * img, size, stride=1)
    return torch.sqrt(torch.clamp(sq - mean * mean, min=0.0) + 1e-8)


def _charbonnier(d: torch.Tensor) -> torch.Tensor:
    return (torch.sqrt(d * d + _CHARBONNIER_EPS**2) - _CHARBONNIER_EPS).mean()


def builtin_perceptual(pred: torch.Tensor, target: torch.Tensor, scales: int = 3) -> torch.Tensor:
    """Sum over scales (2x average pooling between them) of the Charbonnier distance
    between gradient-magnitude maps plus that between 3x3 local standard-deviation maps."""
    a, b = _as_nchw(pred), _as_nchw(target)
    total = a.new_zeros(())
    for s in range(scales):
        if min(a.shape[-2:]) < 4:
            break
        total = total + _charbonnier(_gradient_magnitude(a) - _gradient_magnitude(b))
        total = total + _charbonnier(_local_contrast(a) - _local_contrast(b))
        a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
    return total


_lpips_net = None


def lpips_perceptual(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    global _lpips_net
    if _lpips_net is None:
        try:
            import lpips  # optional extra: pip install artifact[lpips]
        except ImportError as exc:
            raise PerceptualBackendUnavailable(
                "perceptual backend 'lpips' needs the 'lpips' package and its pretrained weights"
            ) from exc
        _lpips_net = lpips.LPIPS(net="alex", verbose=False)
    a, b = _as_nchw(pred), _as_nchw(target)
    return _lpips_net(a * 2 - 1, b * 2 - 1).mean()


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, backend: str = "builtin") -> torch.Tensor:
    if backend == "builtin":
        return builtin_perceptual(pred, target)
    if backend == "lpips":
        return lpips_perceptual(pred, target)
    raise ConfigError(f"unknown perceptual backend {backend!r} (choose from {', '.join(PERCEPTUAL_BACKENDS)})")


def consistency_loss(residuals: DeformationResidual | None) -> torch.Tensor:
    if residuals is None:
        return torch.zeros(())
    return residuals.hinge()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    mse: torch.Tensor
    perceptual: torch.Tensor
    consistency: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("mse", "perceptual", "consistency", "total")}


def total_loss(pred, target, residuals, weights: LossWeights, backend: str = "builtin", patches=None) -> LossBreakdown:
    """lambda_m * MSE + lambda_p * perceptual + lambda_c * consistency.

    ``pred``/``target`` are (..., 3) pixels; ``patches`` optionally gives the
    same pixels as (N, P, P, 3) image patches for the perceptual term (else the
    inputs themselves must be images). The perceptual term is skipped when its
    weight is zero.
    """
    mse = mse_loss(pred, target)
    if weights.lambda_p > 0:
        pp, tp = patches if patches is not None else (pred, target)
        perc = perceptual_loss(pp, tp, backend)
    else:
        perc = mse.new_zeros(())
    cons = consistency_loss(residuals).to(mse.dtype)
    total = weights.lambda_m * mse + weights.lambda_p * perc + weights.lambda_c * cons
    return LossBreakdown(total, mse, perc, cons)
