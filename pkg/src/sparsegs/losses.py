"""Training objectives: photometric term, edge-aware depth term, gating.

The edge-aware depth penalty averages, over all H*W pixels,

    |dx D| * exp(-beta |dx I|) + |dy D| * exp(-beta |dy I|)

with forward differences (the last column/row per axis carries no term)
and the image gradient reduced as the mean absolute difference over the
three channels. The gate weight is applied by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossBreakdown:
    photometric: float
    eadr: float  # already multiplied by eadr_weight
    total: float
    eadr_weight: float


def _gaussian_window(dtype) -> torch.Tensor:
    half = (SSIM_WINDOW - 1) // 2
    xs = torch.arange(-half, half + 1, dtype=dtype)
    w = torch.exp(-(xs ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return w / w.sum()


def _blur(img: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    # img: (C,H,W); separable filtering with replicate padding so constant
    # images stay constant at the borders.
    pad = (SSIM_WINDOW - 1) // 2
    c = img.shape[0]
    x = img.unsqueeze(0)
    x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    kx = kernel.reshape(1, 1, 1, -1).expand(c, 1, 1, SSIM_WINDOW)
    ky = kernel.reshape(1, 1, -1, 1).expand(c, 1, SSIM_WINDOW, 1)
    x = F.conv2d(x, kx, groups=c)
    x = F.conv2d(x, ky, groups=c)
    return x[0]


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM between (H,W,3) tensors, 11x11 Gaussian window."""
    kernel = _gaussian_window(a.dtype)
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    mu_x = _blur(x, kernel)
    mu_y = _blur(y, kernel)
    sigma_x = _blur(x * x, kernel) - mu_x * mu_x
    sigma_y = _blur(y * y, kernel) - mu_y * mu_y
    sigma_xy = _blur(x * y, kernel) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return (num / den).mean()


def photometric_torch(rendered: torch.Tensor, target: torch.Tensor, lambda_dssim: float) -> torch.Tensor:
    l1 = (rendered - target).abs().mean()
    if lambda_dssim == 0.0:
        return l1
    dssim = (1.0 - ssim_torch(rendered, target)) / 2.0
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim


def photometric_loss(rendered, target, lambda_dssim: float = 0.2) -> float:
    """(1-lambda)*L1 + lambda*(1-SSIM)/2 between two (H,W,3) images."""
    a, b = _check_images(rendered, target)
    return float(photometric_torch(a, b, lambda_dssim))


def photometric_with_grad(rendered, target, lambda_dssim: float = 0.2, dtype: torch.dtype = torch.float64):
    """Loss value plus its gradient w.r.t. the rendered image."""
    a, b = _check_images(rendered, target)
    a = a.to(dtype).requires_grad_(True)
    loss = photometric_torch(a, b.to(dtype), lambda_dssim)
    (grad,) = torch.autograd.grad(loss, a)
    return float(loss.detach()), grad.numpy().astype(np.float64)


def eadr_torch(depth: torch.Tensor, image: torch.Tensor, beta: float) -> torch.Tensor:
    n = depth.shape[0] * depth.shape[1]
    ddx = depth[:, 1:] - depth[:, :-1]
    ddy = depth[1:, :] - depth[:-1, :]
    idx = (image[:, 1:, :] - image[:, :-1, :]).abs().mean(dim=2)
    idy = (image[1:, :, :] - image[:-1, :, :]).abs().mean(dim=2)
    term = (ddx.abs() * torch.exp(-beta * idx)).sum() + (ddy.abs() * torch.exp(-beta * idy)).sum()
    return term / n


def eadr_loss(depth, image, beta: float = 2.0) -> float:
    """Edge-aware depth penalty over one (H,W) depth map and its image."""
    d, img = _check_depth_pair(depth, image)
    return float(eadr_torch(d, img, beta))


def eadr_with_grad(depth, image, beta: float = 2.0, dtype: torch.dtype = torch.float64):
    """Loss value plus its gradient w.r.t. the depth map."""
    d, img = _check_depth_pair(depth, image)
    d = d.to(dtype).requires_grad_(True)
    loss = eadr_torch(d, img.to(dtype), beta)
    (grad,) = torch.autograd.grad(loss, d)
    return float(loss.detach()), grad.numpy().astype(np.float64)


def eadr_weight(iteration: int, total_prune_steps: int, i_step: int) -> int:
    """Depth-regularization gate: 0 before the final prune step, 1 after."""
    return 0 if iteration < (total_prune_steps - 1) * i_step else 1


def _check_images(a, b):
    a = torch.tensor(np.asarray(a, dtype=np.float64))
    b = torch.tensor(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape or a.ndim != 3 or a.shape[2] != 3:
        raise ShapeMismatch(f"image shapes {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def _check_depth_pair(depth, image):
    d = torch.tensor(np.asarray(depth, dtype=np.float64))
    img = torch.tensor(np.asarray(image, dtype=np.float64))
    if d.ndim != 2 or img.shape != (d.shape[0], d.shape[1], 3):
        raise ShapeMismatch(f"depth {tuple(d.shape)} incompatible with image {tuple(img.shape)}")
    return d, img
