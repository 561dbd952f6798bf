"""Synthetic time-lapse scenes with analytic flows and masks.

Each scene is a set of textured regions, one semantic class apiece, each
carrying its own motion model in backward-flow pixel units. Frame 0 is
rendered from the textures; every later frame is produced by warping the
previous one with the analytic flow, so ``frames[t+1] ==
warp_backward(frames[t], flows[t])`` holds bitwise by construction. The
same module loads clips back from disk (frames as PNG, flows as .flo,
masks as indexed PNG) with optional temporal striding, composing the
intermediate flows so the resampled timeline stays self-consistent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import DataError
from .flow_io import (
    image_to_unit_range,
    read_flo,
    read_image,
    unit_range_to_uint8,
    write_flo,
    write_image,
)
from .flow_ops import compose_flows, warp_backward
from .taxonomy import (
    CLASS_NAMES,
    class_index,
    masks_to_index_map,
    read_mask,
    validate_partition,
    write_mask,
)

__all__ = [
    "Rect",
    "HalfPlane",
    "PlaidTexture",
    "MotionModel",
    "Region",
    "SceneSpec",
    "Clip",
    "make_scene",
    "save_clip",
    "load_clip",
    "random_scene_spec",
]

MAX_MOTION = 4.0
TEXTURE_ENERGY_FLOOR = 1e-4


@dataclass
class Rect:
    """Axis-aligned rectangle; x1/y1 exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    def contains(self, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
        return (xs >= self.x0) & (xs < self.x1) & (ys >= self.y0) & (ys < self.y1)

    def to_dict(self) -> dict:
        return {"kind": "rect", "x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}


@dataclass
class HalfPlane:
    """Pixels where a*x + b*y < c."""

    a: float
    b: float
    c: float

    def contains(self, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
        return self.a * xs + self.b * ys < self.c

    def to_dict(self) -> dict:
        return {"kind": "halfplane", "a": self.a, "b": self.b, "c": self.c}


def _geometry_from_dict(data: dict) -> "Rect | HalfPlane":
    kind = data.get("kind")
    if kind == "rect":
        return Rect(data["x0"], data["y0"], data["x1"], data["y1"])
    if kind == "halfplane":
        return HalfPlane(data["a"], data["b"], data["c"])
    raise DataError(f"unknown region geometry kind: {kind!r}")


@dataclass
class PlaidTexture:
    """Sum of a horizontal and a vertical sinusoidal grating.

    Frequencies are in cycles per pixel; each color channel is phase
    shifted by ``channel_shift`` radians so the texture is chromatic.
    """

    freq_x: float = 0.05
    freq_y: float = 0.08
    phase_x: float = 0.0
    phase_y: float = 0.0
    amplitude: float = 0.8
    offset: float = 0.0
    channel_shift: float = 2.0

    def render(self, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
        """Evaluate the texture on coordinate grids; returns (3, H, W) in [-1, 1]."""
        channels = []
        for c in range(3):
            shift = c * self.channel_shift
            gx = torch.sin(2 * math.pi * self.freq_x * xs + self.phase_x + shift)
            gy = torch.sin(2 * math.pi * self.freq_y * ys + self.phase_y + shift)
            channels.append(self.offset + self.amplitude * 0.5 * (gx + gy))
        tex = torch.stack(channels)
        if tex.abs().max() > 1:
            raise ValueError("PlaidTexture: offset + amplitude must keep values in [-1, 1]")
        return tex

    def to_dict(self) -> dict:
        return {
            "freq_x": self.freq_x,
            "freq_y": self.freq_y,
            "phase_x": self.phase_x,
            "phase_y": self.phase_y,
            "amplitude": self.amplitude,
            "offset": self.offset,
            "channel_shift": self.channel_shift,
        }


@dataclass
class MotionModel:
    """Backward flow of a region, constant or sinusoidal in time.

    ``(u, v)`` is the constant component in pixels/step; the optional
    sinusoid adds ``amp * sin(2*pi*t/period + phase)`` per component. The
    values ARE the backward flow: frame t+1 at pixel p shows frame t at
    p + (u, v).
    """

    u: float = 0.0
    v: float = 0.0
    amp_u: float = 0.0
    amp_v: float = 0.0
    period: float = 8.0
    phase: float = 0.0

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("MotionModel: period must be positive")
        if abs(self.u) + abs(self.amp_u) > MAX_MOTION or abs(self.v) + abs(self.amp_v) > MAX_MOTION:
            raise ValueError(
                f"MotionModel: per-step motion bound {MAX_MOTION} px exceeded "
                f"(u={self.u}±{self.amp_u}, v={self.v}±{self.amp_v})"
            )

    def at(self, t: int) -> tuple[float, float]:
        s = math.sin(2 * math.pi * t / self.period + self.phase)
        return self.u + self.amp_u * s, self.v + self.amp_v * s

    def to_dict(self) -> dict:
        return {
            "u": self.u,
            "v": self.v,
            "amp_u": self.amp_u,
            "amp_v": self.amp_v,
            "period": self.period,
            "phase": self.phase,
        }


@dataclass
class Region:
    class_name: str
    geometry: Rect | HalfPlane
    texture: PlaidTexture = field(default_factory=PlaidTexture)
    motion: MotionModel = field(default_factory=MotionModel)

    def __post_init__(self):
        class_index(self.class_name)  # validates the name

    def to_dict(self) -> dict:
        return {
            "class_name": self.class_name,
            "geometry": self.geometry.to_dict(),
            "texture": self.texture.to_dict(),
            "motion": self.motion.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Region":
        return cls(
            class_name=data["class_name"],
            geometry=_geometry_from_dict(data["geometry"]),
            texture=PlaidTexture(**data["texture"]),
            motion=MotionModel(**data["motion"]),
        )


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    regions: list[Region] = field(default_factory=list)
    frame_count: int = 8  # number of steps; the clip has frame_count+1 frames
    seed: int = 0
    background_texture: PlaidTexture | None = None

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError("SceneSpec: size must be at least 2x2")
        if self.frame_count < 1:
            raise ValueError("SceneSpec: frame_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "size": [self.height, self.width],
            "frame_count": self.frame_count,
            "seed": self.seed,
            "regions": [r.to_dict() for r in self.regions],
            "background_texture": (
                self.background_texture.to_dict() if self.background_texture else None
            ),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        bg = data.get("background_texture")
        return cls(
            height=data["size"][0],
            width=data["size"][1],
            regions=[Region.from_dict(r) for r in data["regions"]],
            frame_count=data["frame_count"],
            seed=data.get("seed", 0),
            background_texture=PlaidTexture(**bg) if bg else None,
        )


@dataclass
class Clip:
    """A loaded or generated clip: T+1 frames, T flows, T+1 mask sets."""

    frames: torch.Tensor  # (T+1, 3, H, W) in [-1, 1]
    flows: torch.Tensor  # (T, 2, H, W) backward, pixel units
    masks: torch.Tensor  # (T+1, N, H, W) binary partition per frame
    class_names: tuple[str, ...] = CLASS_NAMES
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.shape[0] != self.flows.shape[0] + 1:
            raise ValueError(
                f"Clip: {self.frames.shape[0]} frames need "
                f"{self.frames.shape[0] - 1} flows, got {self.flows.shape[0]}"
            )
        if self.masks.shape[0] != self.frames.shape[0]:
            raise ValueError("Clip: one mask set per frame required")

    @property
    def num_steps(self) -> int:
        return self.flows.shape[0]


def _region_masks(spec: SceneSpec) -> torch.Tensor:
    """Rasterize regions into a full-taxonomy (N, H, W) partition.

    Overlapping regions or duplicate class names are spec errors; pixels
    claimed by no region fall to class "others".
    """
    ys, xs = torch.meshgrid(
        torch.arange(spec.height, dtype=torch.float32),
        torch.arange(spec.width, dtype=torch.float32),
        indexing="ij",
    )
    claimed = torch.zeros(spec.height, spec.width, dtype=torch.bool)
    masks = torch.zeros(len(CLASS_NAMES), spec.height, spec.width)
    seen: set[str] = set()
    for region in spec.regions:
        if region.class_name in seen:
            raise ValueError(f"SceneSpec: duplicate region class {region.class_name!r}")
        seen.add(region.class_name)
        inside = region.geometry.contains(xs, ys)
        if (inside & claimed).any():
            raise ValueError(
                f"SceneSpec: region {region.class_name!r} overlaps an earlier region"
            )
        claimed |= inside
        masks[class_index(region.class_name)] = inside.to(masks.dtype)
    leftover = ~claimed
    if leftover.any():
        if "others" in seen:
            raise ValueError(
                "SceneSpec: regions do not cover the frame but class 'others' is taken"
            )
        masks[class_index("others")] = leftover.to(masks.dtype)
    validate_partition(masks)
    return masks


def _texture_energy(image: torch.Tensor, region_mask: torch.Tensor) -> float:
    """Mean squared finite-difference gradient inside a region."""
    gx = image[:, :, 1:] - image[:, :, :-1]
    gy = image[:, 1:, :] - image[:, :-1, :]
    mx = region_mask[:, 1:] * region_mask[:, :-1]
    my = region_mask[1:, :] * region_mask[:-1, :]
    total = (gx.pow(2) * mx).sum() + (gy.pow(2) * my).sum()
    count = 3 * (mx.sum() + my.sum())
    if count == 0:
        return float("inf")  # degenerate sliver; nothing to assert on
    return float(total / count)


def make_scene(spec: SceneSpec) -> Clip:
    """Render a synthetic clip from a scene description.

    Frame 0 comes from the region textures; each later frame is the
    previous frame warped by that step's analytic flow, so the clip
    satisfies the warp recurrence exactly.
    """
    masks = _region_masks(spec)
    ys, xs = torch.meshgrid(
        torch.arange(spec.height, dtype=torch.float32),
        torch.arange(spec.width, dtype=torch.float32),
        indexing="ij",
    )
    frame0 = torch.zeros(3, spec.height, spec.width)
    background = spec.background_texture or PlaidTexture(
        freq_x=0.11, freq_y=0.07, phase_x=0.9, phase_y=2.1, amplitude=0.7
    )
    painted = torch.zeros(spec.height, spec.width)
    for region in spec.regions:
        region_mask = masks[class_index(region.class_name)]
        frame0 = frame0 + region.texture.render(xs, ys) * region_mask
        painted = painted + region_mask
    leftover = 1.0 - painted
    if leftover.any():
        frame0 = frame0 + background.render(xs, ys) * leftover

    for region in spec.regions:
        region_mask = masks[class_index(region.class_name)]
        energy = _texture_energy(frame0, region_mask)
        if energy < TEXTURE_ENERGY_FLOOR:
            raise ValueError(
                f"SceneSpec: texture in region {region.class_name!r} is too flat "
                f"(gradient energy {energy:.2e} < {TEXTURE_ENERGY_FLOOR})"
            )

    frames = [frame0]
    flows = []
    for t in range(spec.frame_count):
        flow = torch.zeros(2, spec.height, spec.width)
        for region in spec.regions:
            region_mask = masks[class_index(region.class_name)]
            u, v = region.motion.at(t)
            flow[0] = flow[0] + u * region_mask
            flow[1] = flow[1] + v * region_mask
        flows.append(flow)
        frames.append(warp_backward(frames[-1], flow))

    frames_t = torch.stack(frames)
    flows_t = torch.stack(flows)
    masks_t = masks.unsqueeze(0).expand(spec.frame_count + 1, -1, -1, -1).clone()
    return Clip(
        frames=frames_t,
        flows=flows_t,
        masks=masks_t,
        class_names=CLASS_NAMES,
        meta={"spec": spec.to_dict()},
    )


def save_clip(clip: Clip, directory: str | Path) -> Path:
    """Write a clip in the on-disk layout.

    ``frames/frame_%06d.png`` (8-bit RGB), ``flows/flow_%06d.flo``
    (backward flow from frame t to t+1), ``masks/mask_%06d.png`` (indexed
    PNG per the class taxonomy), plus ``manifest.json``.
    """
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    (directory / "flows").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    num_frames = clip.frames.shape[0]
    for t in range(num_frames):
        write_image(directory / "frames" / f"frame_{t:06d}.png",
                    unit_range_to_uint8(clip.frames[t]))
        write_mask(directory / "masks" / f"mask_{t:06d}.png",
                   masks_to_index_map(clip.masks[t]))
    for t in range(clip.num_steps):
        write_flo(directory / "flows" / f"flow_{t:06d}.flo", clip.flows[t])
    manifest = {
        "size": [int(clip.frames.shape[-2]), int(clip.frames.shape[-1])],
        "frame_count": int(clip.num_steps),
        "classes": list(clip.class_names),
        "seed": clip.meta.get("spec", {}).get("seed"),
        "motion_models": {
            r["class_name"]: r["motion"]
            for r in clip.meta.get("spec", {}).get("regions", [])
        },
    }
    if "spec" in clip.meta:
        manifest["scene_spec"] = clip.meta["spec"]
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_clip(directory: str | Path, stride: int = 1) -> Clip:
    """Read a clip directory, optionally resampling the timeline.

    With ``stride > 1``, frames and masks are taken every ``stride``
    steps and the stored per-step flows are composed across each window
    so the resampled flows still map frame k to frame k+1 of the new
    timeline. A trailing remainder shorter than ``stride`` is dropped.
    """
    directory = Path(directory)
    if stride < 1:
        raise ValueError("load_clip: stride must be >= 1")
    if not directory.is_dir():
        raise DataError(f"clip directory not found: {directory}")
    frame_paths = sorted((directory / "frames").glob("frame_*.png"))
    if len(frame_paths) < 2:
        raise DataError(f"clip needs at least 2 frames, found {len(frame_paths)} in {directory}")
    frames = []
    masks = []
    for path in frame_paths:
        index = int(path.stem.split("_")[1])
        frames.append(image_to_unit_range(read_image(path)))
        mask_path = directory / "masks" / f"mask_{index:06d}.png"
        if not mask_path.exists():
            raise DataError(f"missing mask file for frame {index}: {mask_path}")
        masks.append(read_mask(mask_path))
    flows = []
    for t in range(len(frame_paths) - 1):
        flow_path = directory / "flows" / f"flow_{t:06d}.flo"
        if not flow_path.exists():
            raise DataError(f"missing flow file for frame pair ({t}, {t + 1}): {flow_path}")
        flows.append(read_flo(flow_path))

    meta: dict = {}
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        meta["manifest"] = json.loads(manifest_path.read_text())

    if stride > 1:
        keep = list(range(0, len(frames), stride))
        if len(keep) < 2:
            raise DataError(
                f"clip too short for stride {stride}: {len(frames)} frames in {directory}"
            )
        new_flows = []
        for k in range(len(keep) - 1):
            start = keep[k]
            acc = flows[start]
            for j in range(start + 1, start + stride):
                acc = compose_flows(acc, flows[j])
            new_flows.append(acc)
        frames = [frames[i] for i in keep]
        masks = [masks[i] for i in keep]
        flows = new_flows
        meta["stride"] = stride

    return Clip(
        frames=torch.stack(frames),
        flows=torch.stack(flows),
        masks=torch.stack(masks),
        class_names=CLASS_NAMES,
        meta=meta,
    )


def random_scene_spec(
    seed: int,
    size: int = 64,
    frame_count: int = 8,
    motion_values: tuple[float, ...] = (-2.0, -1.0, 1.0, 2.0),
    classes: tuple[str, str] | None = None,
) -> SceneSpec:
    """Draw a two-region scene: a half split with independent motions.

    Each region's motion is horizontal, drawn from ``motion_values``;
    textures and the split position are seeded. Used as the training and
    validation oracle for the end-to-end tests.
    """
    gen = torch.Generator().manual_seed(seed)

    def rand() -> float:
        return float(torch.rand((), generator=gen))

    def choice(options):
        return options[int(torch.randint(len(options), (), generator=gen))]

    if classes is None:
        names = [n for n in CLASS_NAMES if n != "others"]
        first = choice(names)
        second = choice([n for n in names if n != first])
        classes = (first, second)

    vertical_split = rand() < 0.5
    frac = 0.34 + 0.32 * rand()  # split inside the middle third
    if vertical_split:
        cut = int(round(size * frac))
        geoms = [Rect(0, 0, cut, size), Rect(cut, 0, size, size)]
    else:
        cut = int(round(size * frac))
        geoms = [Rect(0, 0, size, cut), Rect(0, cut, size, size)]

    regions = []
    for name, geom in zip(classes, geoms):
        texture = PlaidTexture(
            freq_x=1 / 32 + rand() * (1 / 8 - 1 / 32),
            freq_y=1 / 32 + rand() * (1 / 8 - 1 / 32),
            phase_x=rand() * 2 * math.pi,
            phase_y=rand() * 2 * math.pi,
            amplitude=0.6 + 0.3 * rand(),
            channel_shift=1.0 + 2.0 * rand(),
        )
        motion = MotionModel(u=choice(motion_values), v=0.0)
        regions.append(Region(name, geom, texture, motion))
    return SceneSpec(height=size, width=size, regions=regions,
                     frame_count=frame_count, seed=seed)
