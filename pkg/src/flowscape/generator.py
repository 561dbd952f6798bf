"""Latent map construction and dense flow generation.

The latent set produced by the motion encoder is spread back over the
frame by painting each semantic's latent vector across its mask, and a
skip-connected encoder-decoder turns that latent map plus the current
frame into a dense flow field. The network ends in tanh; outputs are
mapped to pixel units as ``(g / c) * (width / 2)``, so every component is
strictly inside ``±(width / 2) / c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .encoder import LatentSet
from .taxonomy import validate_partition

__all__ = ["GeneratorConfig", "FlowGenerator", "build_latent_map"]


@dataclass
class GeneratorConfig:
    flow_divisor: float = 32.0
    depth: int = 4
    base_width: int = 32
    latent_dim: int = 2
    image_channels: int = 3
    lrelu_slope: float = 0.1
    # As in the encoder, the first layer skips normalization: instance
    # norm after layer one would erase any constant component of the
    # latent map (its per-channel mean), making uniform motion changes
    # invisible to the network.
    normalize_from: int = 1

    def __post_init__(self):
        if self.flow_divisor <= 1:
            raise ValueError(f"flow_divisor must be > 1, got {self.flow_divisor}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2**i for i in range(self.depth))

    def to_dict(self) -> dict:
        return {
            "flow_divisor": self.flow_divisor,
            "depth": self.depth,
            "base_width": self.base_width,
            "latent_dim": self.latent_dim,
            "image_channels": self.image_channels,
            "lrelu_slope": self.lrelu_slope,
            "normalize_from": self.normalize_from,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        return cls(**data)


def build_latent_map(latents: LatentSet, masks: torch.Tensor) -> torch.Tensor:
    """Paint each semantic's latent vector over its mask.

    Args:
        latents: ``N`` rows of dimension ``d`` (invalid rows are zero).
        masks: ``(N, H, W)`` binary partition of the frame.

    Returns:
        ``(d, H, W)`` map whose value at each pixel is the latent row of
        the one semantic covering that pixel.
    """
    validate_partition(masks)
    if masks.shape[0] != latents.num_classes:
        raise ValueError(
            f"build_latent_map: {latents.num_classes} latent rows vs {masks.shape[0]} masks"
        )
    values = latents.values.to(masks.dtype)
    return torch.einsum("nd,nhw->dhw", values, masks)


def _seeded_conv(in_ch: int, out_ch: int, kernel_size: int, stride: int,
                 generator: torch.Generator | None) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride, padding=kernel_size // 2)
    bound = 1.0 / (in_ch * kernel_size * kernel_size) ** 0.5
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=generator)
        conv.bias.zero_()
    return conv


class _ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, slope: float,
                 normalize: bool, generator: torch.Generator | None):
        super().__init__()
        self.conv = _seeded_conv(in_ch, out_ch, 3, stride, generator)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True) if normalize else nn.Identity()
        self.slope = slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(self.norm(self.conv(x)), self.slope)


class FlowGenerator(nn.Module):
    """Skip-connected encoder-decoder from (latent map ⊕ image) to flow.

    ``depth`` stride-2 blocks halve the resolution, then ``depth``
    nearest-upsample blocks restore it, concatenating the matching-scale
    encoder features (and the raw input at full scale) before each
    decoder convolution.
    """

    def __init__(self, config: GeneratorConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or GeneratorConfig()
        cfg = self.config
        gen = torch.Generator().manual_seed(seed)
        in_ch = cfg.latent_dim + cfg.image_channels
        widths = cfg.widths

        down = []
        ch = in_ch
        for i, width in enumerate(widths):
            down.append(_ConvBlock(ch, width, 2, cfg.lrelu_slope,
                                   normalize=i >= cfg.normalize_from, generator=gen))
            ch = width
        self.down = nn.ModuleList(down)

        up = []
        # Decoder input at each level: upsampled features + skip tensor.
        skip_chs = list(widths[:-1][::-1]) + [in_ch]
        out_chs = list(widths[:-1][::-1]) + [cfg.base_width]
        for skip_ch, out_ch in zip(skip_chs, out_chs):
            up.append(_ConvBlock(ch + skip_ch, out_ch, 1, cfg.lrelu_slope,
                                 normalize=True, generator=gen))
            ch = out_ch
        self.up = nn.ModuleList(up)
        self.out_conv = _seeded_conv(ch, 2, 3, 1, gen)

    def generate_flow(self, latent_map: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        """Produce a pixel-unit flow field.

        Args:
            latent_map: ``(d, H, W)`` or ``(B, d, H, W)``.
            image: ``(3, H, W)`` or ``(B, 3, H, W)``, values in [-1, 1].

        Returns:
            Flow of shape ``(2, H, W)`` / ``(B, 2, H, W)``; every component
            strictly inside ``±(W/2)/c``.
        """
        squeeze = latent_map.dim() == 3
        if squeeze:
            latent_map = latent_map.unsqueeze(0)
        if image.dim() == 3:
            image = image.unsqueeze(0)
        cfg = self.config
        if latent_map.shape[1] != cfg.latent_dim:
            raise ValueError(
                f"generate_flow: latent map has {latent_map.shape[1]} channels, "
                f"expected {cfg.latent_dim}"
            )
        if image.shape[1] != cfg.image_channels:
            raise ValueError(
                f"generate_flow: image has {image.shape[1]} channels, "
                f"expected {cfg.image_channels}"
            )
        if latent_map.shape[-2:] != image.shape[-2:] or latent_map.shape[0] != image.shape[0]:
            raise ValueError(
                f"generate_flow: latent map {tuple(latent_map.shape)} does not align "
                f"with image {tuple(image.shape)}"
            )
        height, width = image.shape[-2:]
        factor = 2**cfg.depth
        if height % factor or width % factor:
            raise ValueError(
                f"generate_flow: spatial dims must be divisible by {factor}, got {height}x{width}"
            )
        if image.abs().max() > 1 + 1e-4:
            raise ValueError("generate_flow: image values must lie in [-1, 1]")

        x = torch.cat([latent_map, image], dim=1)
        skips = [x]
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()  # bottleneck is not its own skip
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skips.pop()], dim=1))
        g = torch.tanh(self.out_conv(x))
        flow = g * (width / 2.0 / cfg.flow_divisor)
        return flow.squeeze(0) if squeeze else flow

    def forward(self, latent_map: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        return self.generate_flow(latent_map, image)
