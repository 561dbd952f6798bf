"""File containers and rendering for flow fields and frames.

Flow files use the Middlebury ``.flo`` layout: little-endian float32 magic
202021.25, int32 width, int32 height, then height*width interleaved (u, v)
float32 pairs in row-major order. Round trips are bit-exact.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError, FormatError

FLO_MAGIC = 202021.25

__all__ = [
    "read_flo",
    "write_flo",
    "flow_to_color",
    "read_image",
    "write_image",
    "image_to_unit_range",
    "unit_range_to_uint8",
]


def read_flo(path: str | os.PathLike) -> torch.Tensor:
    """Read a ``.flo`` file into a ``(2, H, W)`` float32 tensor."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"flow file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: too short for a .flo header ({len(raw)} bytes)")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    width, height = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: non-positive dimensions {width}x{height}")
    expected = 12 + 4 * 2 * width * height
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width, 2)
    return torch.from_numpy(data.copy()).permute(2, 0, 1).contiguous()


def write_flo(path: str | os.PathLike, flow: torch.Tensor) -> None:
    """Write a ``(2, H, W)`` flow tensor as a ``.flo`` file."""
    if flow.dim() != 3 or flow.shape[0] != 2:
        raise ValueError(f"write_flo: expected (2, H, W) flow, got {tuple(flow.shape)}")
    _, height, width = flow.shape
    data = flow.detach().permute(1, 2, 0).contiguous().numpy().astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(np.float32(FLO_MAGIC).tobytes())
        fh.write(np.array([width, height], dtype="<i4").tobytes())
        fh.write(data.tobytes())


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized hexcone HSV -> RGB, all arrays in [0, 1]."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    table = np.stack(
        [
            np.stack([v, t, p], axis=-1),
            np.stack([q, v, p], axis=-1),
            np.stack([p, v, t], axis=-1),
            np.stack([p, q, v], axis=-1),
            np.stack([t, p, v], axis=-1),
            np.stack([v, p, q], axis=-1),
        ],
        axis=0,
    )
    return np.take_along_axis(table, i[None, ..., None], axis=0)[0]


def flow_to_color(flow: torch.Tensor, max_magnitude: float) -> np.ndarray:
    """Render a flow field as an ``(H, W, 3)`` uint8 image.

    Direction maps to hue, speed to saturation: zero flow is white and
    magnitudes at or above ``max_magnitude`` are fully saturated.
    """
    if max_magnitude <= 0:
        raise ValueError(f"flow_to_color: max_magnitude must be > 0, got {max_magnitude}")
    if flow.dim() != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow_to_color: expected (2, H, W) flow, got {tuple(flow.shape)}")
    u = flow[0].detach().numpy().astype(np.float64)
    v = flow[1].detach().numpy().astype(np.float64)
    mag = np.sqrt(u * u + v * v)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / float(max_magnitude), 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG/JPEG into an ``(H, W, 3)`` uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    with Image.open(path) as img:
        return np.array(img.convert("RGB"))


def write_image(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write an ``(H, W)`` or ``(H, W, 3)`` uint8 array as a PNG."""
    if array.dtype != np.uint8:
        raise ValueError(f"write_image: expected uint8 array, got {array.dtype}")
    Image.fromarray(array).save(path)


def image_to_unit_range(array: np.ndarray) -> torch.Tensor:
    """Convert an ``(H, W, C)`` or ``(H, W)`` uint8 image to ``(C, H, W)`` in [-1, 1]."""
    if array.ndim == 2:
        array = array[:, :, None]
    t = torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).float()
    return t / 127.5 - 1.0


def unit_range_to_uint8(image: torch.Tensor) -> np.ndarray:
    """Convert a ``(C, H, W)`` tensor in [-1, 1] back to ``(H, W, C)`` uint8."""
    arr = ((image.detach().clamp(-1, 1) + 1.0) * 127.5).round().numpy().astype(np.uint8)
    return np.transpose(arr, (1, 2, 0))
