"""Per-semantic motion embedding.

The encoder runs a stack of partial convolutions over a flow field, once
per semantic mask, and collapses the surviving valid positions into one
latent vector per semantic via masked global average pooling and an affine
head. Feeding the mask as the validity map means each latent depends only
on flow values inside its own semantic, exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .pconv import MaskedInstanceNorm2d, PartialConv2d
from .taxonomy import validate_partition

__all__ = ["EncoderConfig", "LatentSet", "MotionEncoder", "prepare_encoder_inputs"]


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64, 64)
    kernel_size: int = 3
    stride: int = 2
    latent_dim: int = 2
    in_channels: int = 2
    lrelu_slope: float = 0.1
    # Layer indices that get masked instance normalization. Default: none.
    # Two degeneracies rule it out as a default: normalizing the final layer
    # zeroes the masked mean right before the pooled head (with a 1x1 final
    # map the single valid position minus its own mean is exactly 0), and
    # with zero-initialized conv biases the trunk is positively homogeneous,
    # so any interior normalization erases the flow-magnitude signal that
    # speed control depends on.
    normalized_layers: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "latent_dim": self.latent_dim,
            "in_channels": self.in_channels,
            "lrelu_slope": self.lrelu_slope,
            "normalized_layers": list(self.normalized_layers),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        data = dict(data)
        data["widths"] = tuple(data["widths"])
        data["normalized_layers"] = tuple(data.get("normalized_layers", ()))
        return cls(**data)


@dataclass
class LatentSet:
    """One motion vector per semantic class.

    ``values`` is ``(N, d)``; rows whose semantic had no valid pixels are
    all-zero and flagged False in ``valid``.
    """

    values: torch.Tensor
    valid: torch.Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ValueError(f"LatentSet values must be (N, d), got {tuple(self.values.shape)}")
        if self.valid is None:
            self.valid = torch.ones(
                self.values.shape[0], dtype=torch.bool, device=self.values.device
            )
        if self.valid.shape != (self.values.shape[0],):
            raise ValueError("LatentSet valid flags must be one per row")

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.values.shape[1]


def prepare_encoder_inputs(
    flow: torch.Tensor, masks: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Downsample generator-resolution flow and masks to encoder resolution.

    The flow is 2x2 average pooled (displacement values keep their original
    pixel units); masks are nearest-neighbor subsampled so they stay binary
    and still partition the frame.
    """
    if flow.shape[-2:] != masks.shape[-2:]:
        raise ValueError(
            f"prepare_encoder_inputs: flow/mask spatial dims differ, "
            f"{tuple(flow.shape[-2:])} vs {tuple(masks.shape[-2:])}"
        )
    height, width = flow.shape[-2:]
    if height % 2 or width % 2:
        raise ValueError(f"prepare_encoder_inputs: dimensions must be even, got {height}x{width}")
    small_flow = F.avg_pool2d(flow.unsqueeze(0), 2).squeeze(0) if flow.dim() == 3 else F.avg_pool2d(flow, 2)
    small_masks = masks[..., ::2, ::2]
    return small_flow, small_masks


class MotionEncoder(nn.Module):
    """Partial-convolution trunk plus masked pooling head."""

    def __init__(self, config: EncoderConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or EncoderConfig()
        gen = torch.Generator().manual_seed(seed)
        cfg = self.config
        layers = []
        norms = []
        in_ch = cfg.in_channels
        for i, width in enumerate(cfg.widths):
            layers.append(
                PartialConv2d(in_ch, width, cfg.kernel_size, cfg.stride, generator=gen)
            )
            norms.append(
                MaskedInstanceNorm2d(width) if i in cfg.normalized_layers else nn.Identity()
            )
            in_ch = width
        self.layers = nn.ModuleList(layers)
        self.norms = nn.ModuleList(norms)
        head = torch.empty(cfg.latent_dim, in_ch)
        head.uniform_(-1.0 / in_ch**0.5, 1.0 / in_ch**0.5, generator=gen)
        self.head_weight = nn.Parameter(head)
        self.head_bias = nn.Parameter(torch.zeros(cfg.latent_dim))

    def trunk(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the partial-conv stack; ``x`` (B,C,H,W), ``mask`` (B,1,H,W)."""
        for layer, norm in zip(self.layers, self.norms):
            x, mask = layer(x, mask)
            if not isinstance(norm, nn.Identity):
                x = norm(x, mask)
            x = F.leaky_relu(x, self.config.lrelu_slope)
            x = x * mask
        return x, mask

    def encode_rows(
        self, flows: torch.Tensor, masks: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch of (flow, mask-row) pairs.

        Args:
            flows: ``(B, 2, H, W)`` flow per row.
            masks: ``(B, 1, H, W)`` one binary mask per row.

        Returns:
            ``(values, valid)`` with values ``(B, d)``; rows whose mask never
            reaches the trunk output are zero with valid=False.
        """
        feats, final_mask = self.trunk(flows, masks)
        count = final_mask.sum(dim=(-2, -1)).clamp_min(1.0)
        pooled = (feats * final_mask).sum(dim=(-2, -1)) / count
        values = pooled @ self.head_weight.t() + self.head_bias
        valid = final_mask.sum(dim=(1, 2, 3)) > 0
        values = values * valid.unsqueeze(1)
        return values, valid

    def forward(self, flow: torch.Tensor, masks: torch.Tensor) -> LatentSet:
        return self.encode(flow, masks)

    def encode(self, flow: torch.Tensor, masks: torch.Tensor) -> LatentSet:
        """Embed one flow field against a full semantic partition.

        Args:
            flow: ``(2, H, W)`` at encoder resolution.
            masks: ``(N, H, W)`` binary partition at the same resolution.
        """
        if flow.dim() != 3 or flow.shape[0] != self.config.in_channels:
            raise ValueError(f"encode: expected ({self.config.in_channels}, H, W) flow")
        if not torch.isfinite(flow).all():
            raise ValueError("encode: flow contains non-finite values")
        validate_partition(masks)
        num = masks.shape[0]
        flows = flow.unsqueeze(0).expand(num, -1, -1, -1)
        values, valid = self.encode_rows(flows, masks.unsqueeze(1))
        return LatentSet(values=values, valid=valid)

    def encode_class(self, flow: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, bool]:
        """Embed a single semantic: ``mask`` is one ``(H, W)`` binary map."""
        values, valid = self.encode_rows(flow.unsqueeze(0), mask.reshape(1, 1, *mask.shape[-2:]))
        return values[0], bool(valid[0])
