"""Flat key=value run configuration shared by the command-line tools.

The file format is one ``key = value`` pair per line; blank lines and
``#`` comments are ignored. Exactly the documented keys are accepted —
anything else is a format error — and command-line flags override file
values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import FormatError
from .generator import GeneratorConfig
from .losses import LossConfig
from .training import TrainConfig

__all__ = ["RunConfig", "parse_config_text", "load_run_config", "CONFIG_KEY_DOCS"]

# key -> (type, help text); the authoritative list of config keys.
CONFIG_KEY_DOCS: dict[str, tuple[type, str]] = {
    "alpha": (float, "flow reconstruction loss weight"),
    "beta": (float, "smoothness loss weight"),
    "sigma": (float, "edge-weight bandwidth of the smoothness loss"),
    "c": (float, "flow range divisor: max |flow| is (width/2)/c pixels"),
    "latent_dim": (int, "motion latent dimension per semantic"),
    "lr": (float, "optimizer learning rate"),
    "epochs": (int, "training epochs (one sampled pair per clip per epoch)"),
    "batch": (int, "training batch size"),
    "seed": (int, "seed for parameter init and pair sampling"),
    "stride": (int, "temporal resampling stride applied when loading clips"),
}


@dataclass
class RunConfig:
    alpha: float = 0.5
    beta: float = 5.0
    sigma: float = 0.1
    c: float = 32.0
    latent_dim: int = 2
    lr: float = 1e-4
    epochs: int = 500
    batch: int = 8
    seed: int = 0
    stride: int = 4

    def apply_overrides(self, overrides: dict) -> "RunConfig":
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in CONFIG_KEY_DOCS:
                raise FormatError(f"unknown config key: {key}")
            setattr(self, key, CONFIG_KEY_DOCS[key][0](value))
        return self

    def to_loss_config(self, tv_on_generated: bool = True) -> LossConfig:
        return LossConfig(alpha=self.alpha, beta=self.beta, sigma=self.sigma,
                          tv_on_generated=tv_on_generated)

    def to_train_config(self, protocol: str = "flip-encoder") -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch,
                           seed=self.seed, stride=self.stride, protocol=protocol)

    def to_encoder_config(self, widths: tuple[int, ...] = (16, 32, 64, 64)) -> EncoderConfig:
        return EncoderConfig(widths=widths, latent_dim=self.latent_dim)

    def to_generator_config(self, base_width: int = 32) -> GeneratorConfig:
        return GeneratorConfig(flow_divisor=self.c, base_width=base_width,
                               latent_dim=self.latent_dim)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a typed dict; reject unknown keys."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEY_DOCS:
            raise FormatError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise FormatError(f"{source}:{lineno}: duplicate config key {key!r}")
        caster = CONFIG_KEY_DOCS[key][0]
        try:
            values[key] = caster(value)
        except ValueError as exc:
            raise FormatError(
                f"{source}:{lineno}: bad value for {key!r}: {value!r} ({exc})"
            ) from exc
    return values


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, then flag overrides."""
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FormatError(f"config file not found: {path}")
        file_values = parse_config_text(path.read_text(), source=str(path))
        config.apply_overrides(file_values)
    if overrides:
        config.apply_overrides(overrides)
    return config
