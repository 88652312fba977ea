"""Structured training configuration: nested dataclasses, YAML I/O, dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .discriminator import DiscConfig
from .errors import ConfigError
from .losses import LossWeights, PerceptualConfig
from .mff import MODES


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    disc_lr: float | None = None

    def __post_init__(self):
        try:
            # YAML reads "5e-6" as a string
            self.lr, self.beta1, self.beta2 = float(self.lr), float(self.beta1), float(self.beta2)
            self.disc_lr = None if self.disc_lr is None else float(self.disc_lr)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"optimizer: {exc}") from exc
        if self.name != "adam":
            raise ConfigError(f"optimizer.name: only 'adam' is supported, got {self.name!r}")
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer: lr must be > 0 and betas in [0, 1)")


@dataclass
class Prompts:
    c_x: str = "frozen section"
    c_y: str = "paraffin section"


@dataclass
class GeneratorConfig:
    backbone: str = "tiny-random"  # tiny-random | pretrained | identity
    checkpoint: str | None = None
    backbone_seed: int = 0
    arch: dict = field(default_factory=dict)
    rank: int = 8
    scaling: float = 1.0
    targets: typing.Any = "all"
    timestep: int | None = None
    local_adapters: bool = True

    def __post_init__(self):
        if self.backbone not in ("tiny-random", "pretrained", "identity"):
            raise ConfigError(f"generator.backbone: unknown kind {self.backbone!r}")
        if self.rank < 1:
            raise ConfigError(f"generator.rank must be >= 1, got {self.rank}")


@dataclass
class MFFConfig:
    mode: str = "each_layer"
    grid: list = field(default_factory=lambda: [2, 2])

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mff.mode must be one of {MODES}, got {self.mode!r}")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError(f"mff.grid must be [rows, cols] >= 1, got {self.grid}")


@dataclass
class DataConfig:
    dir_x: str | None = None
    dir_y: str | None = None
    val_dir_x: str | None = None
    val_dir_y: str | None = None
    image_size: int | None = None


@dataclass
class ValidationConfig:
    every: int = 2500
    max_images: int = 2000
    extractor: str = "tiny"
    extractor_checkpoint: str | None = None
    kid_subset_size: int = 1000
    kid_subsets: int = 100


@dataclass
class TrainConfig:
    steps: int = 50000
    batch_size: int = 1
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 2500
    deterministic: bool = True
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    prompts: Prompts = field(default_factory=Prompts)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    mff: MFFConfig = field(default_factory=MFFConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    data: DataConfig = field(default_factory=DataConfig)
    validation: ValidationConfig = field(default_factory=ValidationConfig)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and checkpoint_every >= 1 required")

    def to_dict(self):
        # json round trip turns tuples into lists so the dict is YAML-safe
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def model_hash(self):
        """Hash of everything that shapes the trainable state."""
        d = self.to_dict()
        keep = {k: d[k] for k in ("batch_size", "seed", "optimizer", "loss", "prompts",
                                  "generator", "mff", "disc", "perceptual")}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{prefix}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def config_from_dict(data) -> TrainConfig:
    return _build(TrainConfig, data or {})


def _set_dotted(d, dotted, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot override {dotted}: {k} is not a section")
    d[keys[-1]] = value


def load_config(path=None, overrides=None) -> TrainConfig:
    """File values over defaults, ``overrides`` (dotted key -> value) over both."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        _set_dotted(data, key, value)
    return config_from_dict(data)


def parse_override(text):
    """``key=value`` with the value parsed as YAML (so numbers/lists work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def save_config(cfg: TrainConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
