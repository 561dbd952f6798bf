"""Mask-aware convolution primitives.

A partial convolution restricts each window to mask-valid inputs and
rescales the response by ``window_size / valid_count`` so that sparsely
covered semantics are not attenuated; windows with no valid input produce
zero and are marked invalid in the propagated mask. Layers here use
padding-free (valid) windows, so with an all-ones mask the result equals a
plain dense convolution exactly.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

__all__ = ["partial_conv2d", "PartialConv2d", "MaskedInstanceNorm2d"]


def partial_conv2d(
    x: torch.Tensor,
    mask: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply one masked convolution.

    Args:
        x: input features ``(B, C_in, H, W)``.
        mask: binary validity mask ``(B, 1, H, W)`` shared across channels.
        weight: kernel ``(C_out, C_in, k, k)``.
        bias: optional ``(C_out,)``.
        stride: window stride.

    Returns:
        ``(features, mask)`` at the output resolution; invalid positions are
        exactly zero in both.
    """
    if x.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"partial_conv2d: feature/mask spatial dims differ, "
            f"{tuple(x.shape[-2:])} vs {tuple(mask.shape[-2:])}"
        )
    if mask.shape[-3] != 1:
        raise ValueError(f"partial_conv2d: mask must be single-channel, got {mask.shape[-3]}")
    k = weight.shape[-1]
    window = float(weight.shape[-2] * weight.shape[-1])
    ones = torch.ones(1, 1, weight.shape[-2], k, dtype=x.dtype, device=x.device)
    valid_count = F.conv2d(mask, ones, stride=stride)
    raw = F.conv2d(x * mask, weight, None, stride=stride)
    valid = valid_count > 0
    scale = window / valid_count.clamp_min(1.0)
    out = raw * scale
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    out = out * valid
    return out, valid.to(x.dtype)


class PartialConv2d(nn.Module):
    """Learnable masked convolution with valid (padding-free) windows.

    ``forward(x, mask)`` returns updated features and mask. Weights start
    from fan-in-scaled uniform noise drawn from ``generator`` so runs are
    reproducible; biases start at zero.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        weight = torch.empty(out_channels, in_channels, kernel_size, kernel_size)
        bound = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        weight.uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return partial_conv2d(x, mask, self.weight, self.bias, self.stride)

    def extra_repr(self) -> str:
        return (
            f"{self.in_channels}, {self.out_channels}, "
            f"kernel_size={self.kernel_size}, stride={self.stride}"
        )


class MaskedInstanceNorm2d(nn.Module):
    """Instance normalization whose statistics ignore invalid positions.

    Mean and variance are taken per sample and channel over pixels where the
    mask is 1; invalid pixels stay exactly zero. Affine parameters are
    learnable as in ordinary instance norm.
    """

    def __init__(self, num_features: int, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != mask.shape[-2:]:
            raise ValueError("MaskedInstanceNorm2d: feature/mask spatial dims differ")
        count = mask.sum(dim=(-2, -1), keepdim=True).clamp_min(1.0)
        mean = (x * mask).sum(dim=(-2, -1), keepdim=True) / count
        centered = (x - mean) * mask
        var = centered.pow(2).sum(dim=(-2, -1), keepdim=True) / count
        normed = centered / torch.sqrt(var + self.eps)
        out = normed * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)
        return out * mask

    def extra_repr(self) -> str:
        return f"{self.num_features}, eps={self.eps}"
