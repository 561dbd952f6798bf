"""Self-supervised training loop and checkpoint container.

A training sample pairs mirrored encoder inputs with un-mirrored
supervision: the encoder sees the horizontally flipped flow and masks
(displacement values kept as-is), while the generator consumes the
original frame and is supervised by the original flow and next frame.
Mirroring only the encoder side stops the latents from memorizing where
each semantic sits in the frame while keeping the reconstruction losses
mutually consistent.

Checkpoints are single ``.npz`` files holding both networks' parameters
plus every config as JSON, so a checkpoint alone is enough to rebuild
the model.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig, MotionEncoder, prepare_encoder_inputs
from .errors import DataError, NumericError
from .flow_ops import flip_horizontal, warp_backward
from .generator import FlowGenerator, GeneratorConfig
from .losses import LossConfig, loss_flow, loss_frame, loss_total, loss_tv
from .synth import Clip

__all__ = [
    "TrainConfig",
    "TrainingSample",
    "TrainResult",
    "build_training_sample",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_history_csv",
]

PROTOCOLS = ("flip-encoder", "flip-targets", "none")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 500
    batch: int = 8
    seed: int = 0
    stride: int = 4
    grad_clip: float = 10.0
    protocol: str = "flip-encoder"

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch < 1 or self.stride < 1:
            raise ValueError("TrainConfig: lr, epochs, batch, and stride must be positive")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"TrainConfig: protocol must be one of {PROTOCOLS}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "epochs": self.epochs,
            "batch": self.batch,
            "seed": self.seed,
            "stride": self.stride,
            "grad_clip": self.grad_clip,
            "protocol": self.protocol,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class TrainingSample:
    encoder_flow: torch.Tensor  # (2, H/2, W/2), mirrored under the default protocol
    encoder_masks: torch.Tensor  # (N, H/2, W/2), mirrored alongside the flow
    gen_image: torch.Tensor  # (3, H, W), frame t
    gen_masks: torch.Tensor  # (N, H, W)
    target_flow: torch.Tensor  # (2, H, W), flow t
    target_frame: torch.Tensor  # (3, H, W), frame t+1


def build_training_sample(
    clip: Clip, t_index: int, protocol: str = "flip-encoder"
) -> TrainingSample:
    """Assemble one (t, t+1) supervision pair from a clip.

    ``protocol`` picks where the horizontal mirroring happens:
    ``flip-encoder`` (default) mirrors only the encoder's flow/masks;
    ``flip-targets`` mirrors the generator side instead (image, masks,
    supervision targets) while the encoder sees originals; ``none``
    disables mirroring. Flow values are never negated by the mirroring.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"build_training_sample: unknown protocol {protocol!r}")
    if clip.num_steps < 1:
        raise DataError("build_training_sample: clip has fewer than 2 frames")
    if not 0 <= t_index < clip.num_steps:
        raise ValueError(
            f"build_training_sample: t_index {t_index} out of range [0, {clip.num_steps})"
        )
    flow = clip.flows[t_index]
    masks = clip.masks[t_index]
    image = clip.frames[t_index]
    target_frame = clip.frames[t_index + 1]

    if protocol == "flip-encoder":
        enc_flow, enc_masks = flip_horizontal(flow), flip_horizontal(masks)
        gen_image, gen_masks = image, masks
        target_flow = flow
    elif protocol == "flip-targets":
        enc_flow, enc_masks = flow, masks
        gen_image, gen_masks = flip_horizontal(image), flip_horizontal(masks)
        target_flow, target_frame = flip_horizontal(flow), flip_horizontal(target_frame)
    else:
        enc_flow, enc_masks = flow, masks
        gen_image, gen_masks = image, masks
        target_flow = flow

    enc_flow, enc_masks = prepare_encoder_inputs(enc_flow, enc_masks)
    return TrainingSample(
        encoder_flow=enc_flow,
        encoder_masks=enc_masks,
        gen_image=gen_image,
        gen_masks=gen_masks,
        target_flow=target_flow,
        target_frame=target_frame,
    )


@dataclass
class TrainResult:
    encoder: MotionEncoder
    generator: FlowGenerator
    history: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss_total"] if self.history else float("nan")


def _forward_batch(
    encoder: MotionEncoder,
    generator: FlowGenerator,
    samples: list[TrainingSample],
    loss_config: LossConfig,
) -> dict:
    num_classes = samples[0].encoder_masks.shape[0]
    enc_flows = torch.cat(
        [s.encoder_flow.unsqueeze(0).expand(num_classes, -1, -1, -1) for s in samples]
    )
    enc_masks = torch.cat([s.encoder_masks.unsqueeze(1) for s in samples])
    values, _ = encoder.encode_rows(enc_flows, enc_masks)
    latents = values.reshape(len(samples), num_classes, -1)

    gen_masks = torch.stack([s.gen_masks for s in samples])
    gen_images = torch.stack([s.gen_image for s in samples])
    latent_maps = torch.einsum("bnd,bnhw->bdhw", latents, gen_masks)
    flows_hat = generator.generate_flow(latent_maps, gen_images)
    if not torch.isfinite(flows_hat).all():
        # don't warp with a broken flow (its sample indices would be garbage);
        # hand the caller NaN losses so the divergence path triggers
        nan = flows_hat.new_tensor(float("nan"))
        return {
            "loss_total": nan,
            "loss_frame": nan,
            "loss_flow": nan,
            "loss_tv": nan,
            "flows_hat": flows_hat,
            "latents": latents,
        }
    frames_hat = warp_backward(gen_images, flows_hat)

    target_flows = torch.stack([s.target_flow for s in samples])
    target_frames = torch.stack([s.target_frame for s in samples])
    lf = loss_frame(frames_hat, target_frames)
    lw = loss_flow(flows_hat, target_flows)
    tv_frame = frames_hat if loss_config.tv_on_generated else target_frames
    lt = loss_tv(flows_hat, tv_frame, loss_config.sigma)
    total = loss_total(lf, lw, lt, loss_config)
    return {
        "loss_total": total,
        "loss_frame": lf,
        "loss_flow": lw,
        "loss_tv": lt,
        "flows_hat": flows_hat,
        "latents": latents,
    }


def _dump_diagnostics(path: Path, epoch: int, step: dict, samples: list[TrainingSample]) -> None:
    arrays = {
        "epoch": np.array(epoch),
        "loss_total": step["loss_total"].detach().numpy(),
        "loss_frame": step["loss_frame"].detach().numpy(),
        "loss_flow": step["loss_flow"].detach().numpy(),
        "loss_tv": step["loss_tv"].detach().numpy(),
        "flows_hat": step["flows_hat"].detach().numpy(),
        "latents": step["latents"].detach().numpy(),
        "target_flow": torch.stack([s.target_flow for s in samples]).numpy(),
    }
    np.savez(path, **arrays)


def train(
    clips: list[Clip],
    train_config: TrainConfig | None = None,
    loss_config: LossConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    generator_config: GeneratorConfig | None = None,
    log_path: str | Path | None = None,
    dump_dir: str | Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """Fit the encoder and generator on a set of clips.

    Each epoch samples one random (t, t+1) pair per clip, batches them,
    runs encode -> latent map -> generate -> warp, and takes one Adam
    step per batch with gradients clipped at a global norm. Fully
    deterministic for a fixed config: parameter init and the pair
    sampler all derive from ``train_config.seed``.

    Raises:
        NumericError: if any loss goes non-finite; a diagnostic ``.npz``
            is written first (to ``dump_dir`` or the log directory).
    """
    train_config = train_config or TrainConfig()
    loss_config = loss_config or LossConfig()
    if not clips:
        raise DataError("train: empty dataset")
    sizes = {tuple(c.frames.shape[-2:]) for c in clips}
    if len(sizes) > 1:
        raise DataError(f"train: clips must share one frame size, got {sorted(sizes)}")

    encoder = MotionEncoder(encoder_config, seed=train_config.seed)
    generator = FlowGenerator(generator_config, seed=train_config.seed + 1)
    sampler = torch.Generator().manual_seed(train_config.seed + 2)
    params = list(encoder.parameters()) + list(generator.parameters())
    optimizer = torch.optim.Adam(params, lr=train_config.lr)

    history: list[dict] = []
    start = time.monotonic()
    for epoch in range(train_config.epochs):
        order = torch.randperm(len(clips), generator=sampler).tolist()
        samples = []
        for clip_index in order:
            clip = clips[clip_index]
            t = int(torch.randint(clip.num_steps, (), generator=sampler))
            samples.append(build_training_sample(clip, t, train_config.protocol))

        sums = {"loss_total": 0.0, "loss_frame": 0.0, "loss_flow": 0.0, "loss_tv": 0.0}
        batches = 0
        for lo in range(0, len(samples), train_config.batch):
            batch = samples[lo : lo + train_config.batch]
            step = _forward_batch(encoder, generator, batch, loss_config)
            total = step["loss_total"]
            if not torch.isfinite(total):
                dump_base = Path(dump_dir) if dump_dir else (
                    Path(log_path).parent if log_path else Path(".")
                )
                dump_path = dump_base / f"diagnostic_epoch{epoch:04d}.npz"
                _dump_diagnostics(dump_path, epoch, step, batch)
                raise NumericError(
                    f"non-finite loss at epoch {epoch} "
                    f"(frame={float(step['loss_frame']):.4g}, "
                    f"flow={float(step['loss_flow']):.4g}, "
                    f"tv={float(step['loss_tv']):.4g}); state dumped to {dump_path}"
                )
            optimizer.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(params, train_config.grad_clip)
            optimizer.step()
            for key in sums:
                sums[key] += float(step[key].detach())
            batches += 1

        row = {"epoch": epoch}
        row.update({key: sums[key] / batches for key in sums})
        history.append(row)
        if progress and (epoch % 10 == 0 or epoch == train_config.epochs - 1):
            print(
                f"epoch {epoch:4d}  loss {row['loss_total']:.5f}  "
                f"(frame {row['loss_frame']:.5f}  flow {row['loss_flow']:.5f}  "
                f"tv {row['loss_tv']:.5f})  {time.monotonic() - start:.1f}s",
                flush=True,
            )

    if log_path is not None:
        write_history_csv(history, log_path)
    return TrainResult(encoder=encoder, generator=generator, history=history)


def write_history_csv(history: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "loss_total", "loss_frame", "loss_flow", "loss_tv"]
        )
        writer.writeheader()
        writer.writerows(history)


def save_checkpoint(
    path: str | Path,
    encoder: MotionEncoder,
    generator: FlowGenerator,
    loss_config: LossConfig | None = None,
    train_config: TrainConfig | None = None,
) -> Path:
    """Write both networks and their configs to one ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in (("enc", encoder), ("gen", generator)):
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().numpy()
    meta = {
        "encoder_config": encoder.config.to_dict(),
        "generator_config": generator.config.to_dict(),
        "loss_config": (loss_config or LossConfig()).to_dict(),
        "train_config": (train_config or TrainConfig()).to_dict(),
    }
    arrays["meta_json"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[MotionEncoder, FlowGenerator, dict]:
    """Rebuild encoder and generator from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc
    if "meta_json" not in data:
        raise DataError(f"checkpoint {path} is missing its config block")
    meta = json.loads(str(data["meta_json"]))
    encoder = MotionEncoder(EncoderConfig.from_dict(meta["encoder_config"]))
    generator = FlowGenerator(GeneratorConfig.from_dict(meta["generator_config"]))
    for prefix, module in (("enc", encoder), ("gen", generator)):
        state = {
            key[len(prefix) + 1 :]: torch.from_numpy(np.array(data[key]))
            for key in data.files
            if key.startswith(prefix + "/")
        }
        module.load_state_dict(state)
    return encoder, generator, meta
