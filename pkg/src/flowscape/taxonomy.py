"""The fixed semantic taxonomy and the indexed-PNG mask container.

Class index 0 is the catch-all "others"; a mask set is a ``(6, H, W)``
binary float tensor whose rows follow CLASS_NAMES and partition the frame.
On disk a mask is a paletted 8-bit PNG holding the class index per pixel.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError

CLASS_NAMES: tuple[str, ...] = ("others", "sky", "tree", "grass", "water", "waterfall")
NUM_CLASSES = len(CLASS_NAMES)

# Palette for viewing mask PNGs; indices beyond NUM_CLASSES stay black.
_PALETTE = [
    (90, 90, 90),      # others
    (70, 130, 220),    # sky
    (30, 110, 40),     # tree
    (120, 190, 60),    # grass
    (40, 70, 180),     # water
    (200, 230, 255),   # waterfall
]

__all__ = [
    "CLASS_NAMES",
    "NUM_CLASSES",
    "class_index",
    "index_map_to_masks",
    "masks_to_index_map",
    "read_mask",
    "write_mask",
    "validate_partition",
]


def class_index(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown semantic class {name!r}; known: {', '.join(CLASS_NAMES)}") from None


def validate_partition(masks: torch.Tensor) -> None:
    """Raise ValueError unless ``masks`` (N,H,W) is binary, disjoint and exhaustive."""
    if masks.dim() != 3:
        raise ValueError(f"mask set must be (N, H, W), got {tuple(masks.shape)}")
    binary = (masks == 0) | (masks == 1)
    if not bool(binary.all()):
        raise ValueError("mask values must be exactly 0 or 1")
    cover = masks.sum(dim=0)
    if not bool((cover == 1).all()):
        bad = int((cover != 1).sum())
        raise ValueError(f"masks must partition the frame; {bad} pixels covered != once")


def index_map_to_masks(index_map: np.ndarray, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """Expand an ``(H, W)`` class-index array into an ``(N, H, W)`` binary mask set."""
    if index_map.ndim != 2:
        raise ValueError(f"index map must be 2-d, got shape {index_map.shape}")
    if index_map.min() < 0 or index_map.max() >= num_classes:
        raise DataError(
            f"mask indices out of range 0..{num_classes - 1}: "
            f"found {int(index_map.min())}..{int(index_map.max())}"
        )
    idx = torch.from_numpy(np.ascontiguousarray(index_map.astype(np.int64)))
    return torch.nn.functional.one_hot(idx, num_classes).permute(2, 0, 1).float()


def masks_to_index_map(masks: torch.Tensor) -> np.ndarray:
    """Collapse a partition mask set back to an ``(H, W)`` uint8 index array."""
    validate_partition(masks)
    return masks.argmax(dim=0).numpy().astype(np.uint8)


def write_mask(path: str | os.PathLike, index_map: np.ndarray) -> None:
    """Write an ``(H, W)`` class-index array as a paletted 8-bit PNG."""
    img = Image.fromarray(index_map.astype(np.uint8), mode="P")
    palette = []
    for rgb in _PALETTE:
        palette.extend(rgb)
    palette.extend([0] * (768 - len(palette)))
    img.putpalette(palette)
    img.save(path)


def read_mask(path: str | os.PathLike, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """Read a mask PNG into an ``(N, H, W)`` binary mask set."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"mask file not found: {path}")
    with Image.open(path) as img:
        if img.mode not in ("P", "L"):
            raise DataError(f"{path}: mask PNG must be paletted or 8-bit gray, got mode {img.mode}")
        index_map = np.asarray(img)
    return index_map_to_masks(index_map, num_classes)
