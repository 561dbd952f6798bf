"""Fine-grained controllable animation from a single image.

Each output frame is produced by warping the ORIGINAL input image with an
accumulated flow, never by warping the previous output: per step, the
reference clips provide per-semantic motion latents (each semantic may
follow a different reference, at its own speed), the generator turns the
resulting latent map plus the current frame into a step flow, and the
step flow is folded into the running input-to-now flow.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .encoder import LatentSet, MotionEncoder, prepare_encoder_inputs
from .errors import DataError, NumericError
from .flow_io import flow_to_color, unit_range_to_uint8, write_flo, write_image
from .flow_ops import add_flows, compose_flows, scale_flow, warp_backward
from .generator import FlowGenerator, build_latent_map
from .synth import Clip
from .taxonomy import CLASS_NAMES, validate_partition

__all__ = ["ReferenceSet", "AnimationResult", "reference_latents", "animate", "save_animation"]

FEED_MODES = ("generated", "first")
ACCUMULATE_MODES = ("compose", "add")


@dataclass
class ReferenceSet:
    """Reference clips plus the per-semantic assignment and speeds.

    ``assignment`` maps class name -> 1-based reference index (classes
    left out follow reference 1); ``speeds`` maps class name -> positive
    multiplier applied to the reference flow before encoding.
    """

    clips: list[Clip]
    assignment: dict[str, int] = field(default_factory=dict)
    speeds: dict[str, float] = field(default_factory=dict)
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if not self.clips:
            raise ValueError("ReferenceSet: at least one reference clip required")
        for name, ref in self.assignment.items():
            if name not in self.class_names:
                raise ValueError(f"ReferenceSet: unknown class {name!r} in assignment")
            if not 1 <= ref <= len(self.clips):
                raise ValueError(
                    f"ReferenceSet: assignment {name}={ref} outside [1, {len(self.clips)}]"
                )
        for name, speed in self.speeds.items():
            if name not in self.class_names:
                raise ValueError(f"ReferenceSet: unknown class {name!r} in speeds")
            if speed <= 0:
                raise ValueError(f"ReferenceSet: speed for {name} must be positive, got {speed}")

    def reference_for(self, name: str) -> int:
        return self.assignment.get(name, 1)

    def speed_for(self, name: str) -> float:
        return self.speeds.get(name, 1.0)

    def to_dict(self) -> dict:
        return {
            "num_references": len(self.clips),
            "assignment": {n: self.reference_for(n) for n in self.class_names},
            "speeds": {n: self.speed_for(n) for n in self.class_names},
        }


def reference_latents(refs: ReferenceSet, t: int, encoder: MotionEncoder) -> LatentSet:
    """Mix one latent row per semantic from its assigned reference.

    For semantic i the step-t flow of reference ``assignment[i]`` (wrapped
    modulo the reference length and pre-scaled by the semantic's speed)
    is encoded against that reference's own masks, and row i of the
    result is kept. A semantic absent from its reference yields a zero,
    invalid row.
    """
    num_classes = len(refs.class_names)
    values = torch.zeros(num_classes, encoder.config.latent_dim)
    valid = torch.zeros(num_classes, dtype=torch.bool)
    cache: dict[tuple[int, float], LatentSet] = {}
    for i, name in enumerate(refs.class_names):
        ref_index = refs.reference_for(name)
        speed = refs.speed_for(name)
        key = (ref_index, speed)
        if key not in cache:
            clip = refs.clips[ref_index - 1]
            if clip.num_steps < 1:
                raise DataError(f"reference {ref_index} has no flows")
            step = t % clip.num_steps
            flow = scale_flow(clip.flows[step], speed)
            enc_flow, enc_masks = prepare_encoder_inputs(flow, clip.masks[step])
            cache[key] = encoder.encode(enc_flow, enc_masks)
        latents = cache[key]
        values[i] = latents.values[i]
        valid[i] = latents.valid[i]
    return LatentSet(values=values, valid=valid)


@dataclass
class AnimationResult:
    """T+1 frames plus the per-step and accumulated flows that made them."""

    frames: torch.Tensor  # (T+1, 3, H, W) in [-1, 1]; frames[0] is the input
    step_flows: torch.Tensor  # (T, 2, H, W)
    accumulated_flows: torch.Tensor  # (T, 2, H, W), input -> step t+1

    @property
    def num_steps(self) -> int:
        return self.step_flows.shape[0]

    def verify_consistency(self) -> bool:
        """Check every frame is exactly the input warped by its stored flow."""
        for t in range(self.num_steps):
            recomputed = warp_backward(self.frames[0], self.accumulated_flows[t])
            if not torch.equal(recomputed, self.frames[t + 1]):
                return False
        return True


def animate(
    image: torch.Tensor,
    refs: ReferenceSet,
    steps: int,
    encoder: MotionEncoder,
    generator: FlowGenerator,
    initial_masks: torch.Tensor | None = None,
    mask_provider: Callable[[torch.Tensor, int], torch.Tensor] | None = None,
    feed: str = "generated",
    accumulate: str = "compose",
) -> AnimationResult:
    """Animate a single image along the reference motions.

    Args:
        image: ``(3, H, W)`` input in [-1, 1]; H, W divisible by the
            generator's downsampling factor.
        refs: reference clips with assignment and speeds.
        steps: number of generated steps T (output has T+1 frames).
        initial_masks: ``(N, H, W)`` partition of the input image; used
            for every step unless ``mask_provider`` is given.
        mask_provider: optional callable ``(frame, t) -> masks`` queried
            per step on the current frame (failures become data errors).
        feed: ``"generated"`` feeds the current generated frame to the
            generator (the recurrent default); ``"first"`` always feeds
            the input image.
        accumulate: ``"compose"`` chains step flows by warping (the
            default); ``"add"`` sums them (cheaper, drifts on rotations).
    """
    if steps < 1:
        raise ValueError(f"animate: steps must be >= 1, got {steps}")
    if feed not in FEED_MODES:
        raise ValueError(f"animate: feed must be one of {FEED_MODES}")
    if accumulate not in ACCUMULATE_MODES:
        raise ValueError(f"animate: accumulate must be one of {ACCUMULATE_MODES}")
    if image.dim() != 3 or image.shape[0] != generator.config.image_channels:
        raise ValueError("animate: image must be (3, H, W)")
    if initial_masks is None and mask_provider is None:
        raise ValueError("animate: initial_masks or mask_provider required")

    def masks_for(frame: torch.Tensor, t: int) -> torch.Tensor:
        if mask_provider is not None:
            try:
                masks = mask_provider(frame, t)
            except Exception as exc:
                raise DataError(f"mask provider failed at step {t}: {exc}") from exc
            validate_partition(masks)
            return masks
        return initial_masks

    if initial_masks is not None:
        validate_partition(initial_masks)
        if initial_masks.shape[-2:] != image.shape[-2:]:
            raise ValueError("animate: initial_masks must match the image size")

    frames = [image]
    step_flows = []
    accumulated_flows = []
    current = image
    accumulated = None
    with torch.no_grad():
        for t in range(steps):
            masks_t = masks_for(current, t)
            latents = reference_latents(refs, t, encoder)
            latent_map = build_latent_map(latents, masks_t)
            gen_input = current if feed == "generated" else image
            step_flow = generator.generate_flow(latent_map, gen_input)
            if not torch.isfinite(step_flow).all():
                raise NumericError(f"non-finite generated flow at step {t}")
            if accumulated is None:
                accumulated = step_flow
            elif accumulate == "compose":
                accumulated = compose_flows(accumulated, step_flow)
            else:
                accumulated = add_flows(accumulated, step_flow)
            current = warp_backward(image, accumulated)
            frames.append(current)
            step_flows.append(step_flow)
            accumulated_flows.append(accumulated)
    return AnimationResult(
        frames=torch.stack(frames),
        step_flows=torch.stack(step_flows),
        accumulated_flows=torch.stack(accumulated_flows),
    )


def _sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def save_animation(
    result: AnimationResult,
    out_dir: str | Path,
    refs: ReferenceSet | None = None,
    manifest_extra: dict | None = None,
    checkpoint_path: str | Path | None = None,
    write_viz: bool = False,
    viz_max_magnitude: float | None = None,
) -> Path:
    """Write frames, flows, optional visualizations, and a run manifest."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    (out_dir / "flows").mkdir(parents=True, exist_ok=True)
    for t in range(result.frames.shape[0]):
        write_image(out_dir / "frames" / f"frame_{t:06d}.png",
                    unit_range_to_uint8(result.frames[t]))
    max_mag = 0.0
    for t in range(result.num_steps):
        write_flo(out_dir / "flows" / f"step_{t:06d}.flo", result.step_flows[t])
        write_flo(out_dir / "flows" / f"accum_{t:06d}.flo", result.accumulated_flows[t])
        max_mag = max(max_mag, float(result.step_flows[t].pow(2).sum(0).max().sqrt()))
    if write_viz:
        (out_dir / "viz").mkdir(exist_ok=True)
        scale = viz_max_magnitude or max(max_mag, 1e-6)
        for t in range(result.num_steps):
            write_image(out_dir / "viz" / f"flow_{t:06d}.png",
                        flow_to_color(result.step_flows[t], scale))
    manifest = {
        "frame_count": int(result.num_steps),
        "references": refs.to_dict() if refs else None,
        "checkpoint_sha256": _sha256(checkpoint_path) if checkpoint_path else None,
    }
    if manifest_extra:
        clash = set(manifest_extra) & set(manifest)
        if clash:
            raise ValueError(f"manifest_extra may not override {sorted(clash)}")
        manifest.update(manifest_extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir
