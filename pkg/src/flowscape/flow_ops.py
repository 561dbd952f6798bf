"""Dense backward-flow fields: warping, composition, scaling, flipping.

Conventions used across the package:

* a flow field is a float tensor of shape ``(2, H, W)`` (or ``(B, 2, H, W)``
  batched); channel 0 is the horizontal displacement u, channel 1 the
  vertical displacement v, both in pixels at the field's own resolution;
* flows are *backward*: the value at output pixel ``p`` tells where in the
  source image to sample, ``source = p + flow(p)``;
* images are float tensors ``(C, H, W)`` / ``(B, C, H, W)``.

All functions are pure and differentiable where that makes sense (warping
and composition back-propagate into both operands).
"""

from __future__ import annotations

import torch

__all__ = [
    "warp_backward",
    "compose_flows",
    "add_flows",
    "scale_flow",
    "flip_horizontal",
]


def _check_spatial(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(
            f"{what}: spatial dimensions differ, "
            f"{tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}"
        )


def _bilinear_sample(img: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Sample ``img`` (B,C,H,W) at absolute pixel coords ``xs``/``ys`` (B,H,W).

    Coordinates outside the image are clamped to the border (replicate
    padding). Integer coordinates reproduce pixel values exactly.
    """
    batch, channels, height, width = img.shape
    xs = xs.clamp(0, width - 1)
    ys = ys.clamp(0, height - 1)
    x0f = xs.floor()
    y0f = ys.floor()
    fx = (xs - x0f).unsqueeze(1)
    fy = (ys - y0f).unsqueeze(1)
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=width - 1)
    y1 = (y0 + 1).clamp(max=height - 1)

    flat = img.reshape(batch, channels, height * width)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * width + xi).reshape(batch, 1, -1).expand(batch, channels, -1)
        return flat.gather(2, idx).reshape(batch, channels, height, width)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    top = v00 * (1 - fx) + v01 * fx
    bottom = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bottom * fy


def warp_backward(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Resample ``image`` through a backward flow.

    ``out(p) = image(p + flow(p))`` with bilinear interpolation and border
    clamping. Accepts ``(C,H,W)``/``(2,H,W)`` or batched 4-d tensors; the
    output matches the image's shape. Zero flow returns the image bit-exact.
    """
    unbatched = image.dim() == 3
    if unbatched != (flow.dim() == 3):
        raise ValueError("warp_backward: image and flow must both be batched or both not")
    img = image.unsqueeze(0) if unbatched else image
    flo = flow.unsqueeze(0) if unbatched else flow
    if flo.shape[-3] != 2:
        raise ValueError(f"warp_backward: flow must have 2 channels, got {flo.shape[-3]}")
    _check_spatial(img, flo, "warp_backward")
    if img.shape[0] != flo.shape[0]:
        raise ValueError("warp_backward: batch sizes differ")

    batch, _, height, width = img.shape
    gx = torch.arange(width, dtype=img.dtype, device=img.device).view(1, 1, width)
    gy = torch.arange(height, dtype=img.dtype, device=img.device).view(1, height, 1)
    xs = gx + flo[:, 0]
    ys = gy + flo[:, 1]
    out = _bilinear_sample(img, xs, ys)
    return out.squeeze(0) if unbatched else out


def compose_flows(accumulated: torch.Tensor, step: torch.Tensor) -> torch.Tensor:
    """Chain two backward flows into one.

    ``result(p) = step(p) + accumulated(p + step(p))``, i.e. warping once by
    the result approximates warping by ``accumulated`` then by ``step``.
    """
    _check_spatial(accumulated, step, "compose_flows")
    if accumulated.shape != step.shape:
        raise ValueError(
            f"compose_flows: shapes differ, {tuple(accumulated.shape)} vs {tuple(step.shape)}"
        )
    return step + warp_backward(accumulated, step)


def add_flows(accumulated: torch.Tensor, step: torch.Tensor) -> torch.Tensor:
    """Plain per-pixel sum of two flows (ablation alternative to compose_flows)."""
    _check_spatial(accumulated, step, "add_flows")
    return accumulated + step


def scale_flow(flow: torch.Tensor, factor: float) -> torch.Tensor:
    """Multiply every displacement by ``factor`` (speed control)."""
    if not torch.isfinite(torch.tensor(float(factor))):
        raise ValueError(f"scale_flow: factor must be finite, got {factor}")
    return flow * float(factor)


def flip_horizontal(flow: torch.Tensor, negate_u: bool = False) -> torch.Tensor:
    """Mirror a flow field left-right.

    With ``negate_u=False`` (the training protocol) displacement values are
    kept as-is and only their positions mirror; ``negate_u=True`` also flips
    the sign of the horizontal component, which is what a flow estimated on
    mirrored frames would look like.
    """
    flipped = torch.flip(flow, dims=[-1])
    if negate_u:
        u, v = flipped.unbind(dim=-3)
        flipped = torch.stack([-u, v], dim=-3)
    return flipped
