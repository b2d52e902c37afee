import math
from typing import Literal

import torch
import torch.nn.functional as F

Padding = Literal["replicate", "reflect", "zeros", "valid"]


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Normalised size x size Gaussian window"""
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    gauss = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    gauss = gauss / gauss.sum()
    return torch.outer(gauss, gauss).to(dtype)


def log_kernel(size: int = 7, sigma: float = 1.0, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    Laplacian of Gaussian kernel shifted to zero sum

    A zero-sum symmetric kernel annihilates constants and, away from the
    border, affine ramps.
    """
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    r2 = (xx ** 2 + yy ** 2) / (2.0 * sigma ** 2)
    kernel = -(1.0 / (math.pi * sigma ** 4)) * (1.0 - r2) * torch.exp(-r2)
    kernel = kernel - kernel.mean()
    return kernel.to(dtype)


def filter2d(x: torch.Tensor, kernel: torch.Tensor, padding: Padding = "replicate") -> torch.Tensor:
    """
    Depthwise 2-D correlation of an N x C x H x W tensor with one kernel

    `valid` returns only positions where the kernel fits entirely.
    """
    channels = x.shape[1]
    k = kernel.to(dtype=x.dtype, device=x.device)
    weight = k.expand(channels, 1, *k.shape).contiguous()
    ph, pw = k.shape[0] // 2, k.shape[1] // 2
    if padding == "valid":
        return F.conv2d(x, weight, groups=channels)
    if padding == "zeros":
        return F.conv2d(x, weight, padding=(ph, pw), groups=channels)
    x = F.pad(x, (pw, pw, ph, ph), mode=padding)
    return F.conv2d(x, weight, groups=channels)


def laplacian_of_gaussian(x: torch.Tensor, size: int = 7, sigma: float = 1.0, padding: Padding = "replicate") -> torch.Tensor:
    """Channelwise LoG response, the gradient operator of the loss terms"""
    return filter2d(x, log_kernel(size, sigma, dtype=x.dtype), padding)
