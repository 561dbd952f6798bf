"""Static-region quality metrics and flow error.

Animated stills are judged on what should NOT move: pixels whose
ground-truth temporal variation exceeds a threshold are masked out, and
PSNR/SSIM are computed on the remaining static region in raw 8-bit
units. Flow accuracy against analytic oracles uses mean endpoint error.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import torch
from torch.nn import functional as F

from .errors import DataError, EvaluationError

__all__ = [
    "dynamic_region_mask",
    "masked_psnr",
    "masked_ssim",
    "endpoint_error",
    "evaluate_frame_dirs",
    "write_metrics_csv",
]

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_THRESHOLD = 2.5
PEAK = 255.0


def _as_float_frames(frames: torch.Tensor | list) -> torch.Tensor:
    if isinstance(frames, (list, tuple)):
        frames = torch.stack([torch.as_tensor(f) for f in frames])
    frames = torch.as_tensor(frames)
    if frames.dim() == 3:  # (T, H, W) grayscale
        frames = frames.unsqueeze(1)
    if frames.dim() != 4:
        raise ValueError(f"expected (T, C, H, W) frames, got {tuple(frames.shape)}")
    return frames.to(torch.float64)


def dynamic_region_mask(
    gt_frames: torch.Tensor | list, threshold: float = DYNAMIC_THRESHOLD
) -> torch.Tensor:
    """Mark pixels that move in the ground-truth video.

    A pixel is dynamic when its temporal mean absolute difference
    (per-step, averaged over channels, then averaged over steps) is
    STRICTLY greater than ``threshold`` in raw 8-bit units. Evaluation
    happens where the returned mask is 0.
    """
    frames = _as_float_frames(gt_frames)
    if frames.shape[0] < 2:
        raise ValueError("dynamic_region_mask: need at least 2 frames")
    diffs = (frames[1:] - frames[:-1]).abs().mean(dim=1)  # (T, H, W) channel mean
    score = diffs.mean(dim=0)  # temporal mean
    return (score > threshold).to(torch.uint8)


def _static_pixels(reference: torch.Tensor, candidate: torch.Tensor,
                   mask: torch.Tensor, op: str) -> torch.Tensor:
    if reference.shape != candidate.shape:
        raise ValueError(
            f"{op}: shape mismatch {tuple(reference.shape)} vs {tuple(candidate.shape)}"
        )
    if mask.shape != reference.shape[-2:]:
        raise ValueError(
            f"{op}: mask {tuple(mask.shape)} does not match frames "
            f"{tuple(reference.shape[-2:])}"
        )
    static = mask == 0
    if not static.any():
        raise EvaluationError(f"{op}: no static pixels to evaluate")
    return static


def masked_psnr(
    reference: torch.Tensor, candidate: torch.Tensor, mask: torch.Tensor
) -> float:
    """PSNR over static pixels, raw 8-bit range, capped at 99.0."""
    static = _static_pixels(reference, candidate, mask, "masked_psnr")
    ref = torch.as_tensor(reference).to(torch.float64)
    cand = torch.as_tensor(candidate).to(torch.float64)
    if ref.dim() == 2:
        ref, cand = ref.unsqueeze(0), cand.unsqueeze(0)
    diff = (ref - cand)[:, static]
    mse = float(diff.pow(2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(PEAK * PEAK / mse), PSNR_CAP)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-coords.pow(2) / (2 * sigma * sigma))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


def masked_ssim(
    reference: torch.Tensor, candidate: torch.Tensor, mask: torch.Tensor
) -> float:
    """Mean local SSIM over windows fully inside the static region.

    11x11 Gaussian weighting (sigma 1.5), stability constants K1=0.01 and
    K2=0.03 at dynamic range 255; windows touching any dynamic pixel (or
    the frame border) are excluded.
    """
    static = _static_pixels(reference, candidate, mask, "masked_ssim")
    ref = torch.as_tensor(reference).to(torch.float64)
    cand = torch.as_tensor(candidate).to(torch.float64)
    if ref.dim() == 2:
        ref, cand = ref.unsqueeze(0), cand.unsqueeze(0)
    if min(ref.shape[-2:]) < SSIM_WINDOW:
        raise EvaluationError(
            f"masked_ssim: no window fits inside the static region "
            f"(frame {tuple(ref.shape[-2:])} is smaller than {SSIM_WINDOW}x{SSIM_WINDOW})"
        )
    channels = ref.shape[0]
    kernel = _gaussian_kernel().reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    kernel_c = kernel.expand(channels, 1, -1, -1)

    valid = F.conv2d(
        static.to(torch.float64).reshape(1, 1, *static.shape),
        torch.ones(1, 1, SSIM_WINDOW, SSIM_WINDOW, dtype=torch.float64),
    )
    window_full = valid[0, 0] > SSIM_WINDOW * SSIM_WINDOW - 0.5
    if not window_full.any():
        raise EvaluationError("masked_ssim: no window fits inside the static region")

    x = ref.unsqueeze(0)
    y = cand.unsqueeze(0)
    mu_x = F.conv2d(x, kernel_c, groups=channels)
    mu_y = F.conv2d(y, kernel_c, groups=channels)
    xx = F.conv2d(x * x, kernel_c, groups=channels) - mu_x * mu_x
    yy = F.conv2d(y * y, kernel_c, groups=channels) - mu_y * mu_y
    xy = F.conv2d(x * y, kernel_c, groups=channels) - mu_x * mu_y
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    )
    return float(ssim_map[0][:, window_full].mean())


def endpoint_error(
    flow_a: torch.Tensor, flow_b: torch.Tensor, mask: torch.Tensor | None = None
) -> float:
    """Mean Euclidean distance between two flow fields, optionally masked.

    ``mask`` (nonzero = include) restricts the average to a region.
    """
    if flow_a.shape != flow_b.shape:
        raise ValueError(
            f"endpoint_error: shape mismatch {tuple(flow_a.shape)} vs {tuple(flow_b.shape)}"
        )
    diff = (flow_a.to(torch.float64) - flow_b.to(torch.float64))
    dist = diff.pow(2).sum(dim=-3).sqrt()
    if mask is None:
        return float(dist.mean())
    if mask.shape != dist.shape[-2:]:
        raise ValueError("endpoint_error: mask does not match flow size")
    include = mask != 0
    if not include.any():
        raise EvaluationError("endpoint_error: empty mask")
    return float(dist[..., include].mean())


def evaluate_frame_dirs(
    generated_dir: str | Path,
    gt_dir: str | Path,
    threshold: float = DYNAMIC_THRESHOLD,
    method: str | None = None,
) -> dict:
    """Compare two frame directories (layout: ``frames/frame_*.png``).

    The dynamic mask comes from the ground-truth frames alone; masked
    PSNR/SSIM are computed per frame between matching frame indices and
    then averaged. If both sides carry flow files, mean endpoint error
    over matching steps is included.
    """
    from .flow_io import read_flo, read_image

    generated_dir, gt_dir = Path(generated_dir), Path(gt_dir)

    def load_frames(d: Path) -> list[torch.Tensor]:
        paths = sorted((d / "frames").glob("frame_*.png"))
        if not paths:
            raise DataError(f"no frames found under {d}/frames")
        return [torch.from_numpy(read_image(p)).permute(2, 0, 1).to(torch.float64)
                for p in paths]

    gen_frames = load_frames(generated_dir)
    gt_frames = load_frames(gt_dir)
    if gen_frames[0].shape != gt_frames[0].shape:
        raise DataError(
            f"frame size mismatch: generated {tuple(gen_frames[0].shape)} "
            f"vs ground truth {tuple(gt_frames[0].shape)}"
        )
    count = min(len(gen_frames), len(gt_frames))
    mask = dynamic_region_mask(torch.stack(gt_frames), threshold)
    psnrs = [masked_psnr(gt_frames[t], gen_frames[t], mask) for t in range(count)]
    ssims = [masked_ssim(gt_frames[t], gen_frames[t], mask) for t in range(count)]

    def load_flows(d: Path) -> list[torch.Tensor]:
        flow_dir = d / "flows"
        if not flow_dir.is_dir():
            return []
        paths = sorted(flow_dir.glob("flow_*.flo")) or sorted(flow_dir.glob("step_*.flo"))
        return [read_flo(p) for p in paths]

    gen_flows = load_flows(generated_dir)
    gt_flows = load_flows(gt_dir)
    epe = None
    if gen_flows and gt_flows:
        steps = min(len(gen_flows), len(gt_flows))
        epe = sum(endpoint_error(gt_flows[t], gen_flows[t]) for t in range(steps)) / steps

    return {
        "clip": gt_dir.name,
        "method": method or generated_dir.name,
        "masked_psnr": sum(psnrs) / count,
        "masked_ssim": sum(ssims) / count,
        "epe": epe,
        "frames": count,
        "threshold": threshold,
    }


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    """Write the metrics report: comment header, then one row per clip/method."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# masked metrics computed per frame, then averaged over frames\n")
        fh.write("# skipped metrics: fid, lpips, fvd (need external pretrained networks)\n")
        writer = csv.DictWriter(
            fh,
            fieldnames=["clip", "method", "masked_psnr", "masked_ssim",
                        "epe", "frames", "threshold"],
        )
        writer.writeheader()
        for row in rows:
            out = dict(row)
            if out.get("epe") is None:
                out["epe"] = ""
            writer.writerow(out)
