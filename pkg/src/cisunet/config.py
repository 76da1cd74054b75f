"""Model, training and data hyperparameters, variant presets, and config files.

Config files are flat TOML: one ``key = value`` per line, keys named exactly
like the dataclass fields below, ``#`` comments allowed. Tuples are written as
TOML arrays. An optional ``preset = "tiny" | "small" | "base"`` key selects the
starting point for model fields; otherwise the base variant is used.

Example::

    preset = "tiny"
    window_size = 4
    shift_size = 2
    learning_rate = 1e-3
    patch_size = [64, 64, 64]
"""

from __future__ import annotations

import dataclasses
import enum
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration value or unreadable config file."""

    def __init__(self, message: str, field_name: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field_name = field_name
        self.line = line


class AttentionVariant(str, enum.Enum):
    CSW_SA = "csw_sa"
    SW_SA = "sw_sa"


def _check(cond: bool, name: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{name}: {message}", field_name=name)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 15
    stage_depths: tuple[int, int, int, int] = (3, 4, 6, 3)
    stage_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    embed_dim: int = 48
    window_size: int = 4
    shift_size: int = 2
    num_heads: int = 3
    mlp_ratio: float = 4.0
    attention_variant: AttentionVariant = AttentionVariant.CSW_SA

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(v) for v in self.stage_depths))
        object.__setattr__(self, "stage_channels", tuple(int(v) for v in self.stage_channels))
        object.__setattr__(self, "attention_variant", AttentionVariant(self.attention_variant))
        self.validate()

    def validate(self) -> None:
        _check(self.in_channels > 0, "in_channels", "must be positive")
        _check(self.num_classes >= 2, "num_classes", "must be >= 2")
        _check(len(self.stage_depths) == 4, "stage_depths", "must have 4 entries")
        _check(all(v > 0 for v in self.stage_depths), "stage_depths", "entries must be positive")
        _check(len(self.stage_channels) == 4, "stage_channels", "must have 4 entries")
        _check(all(v > 0 for v in self.stage_channels), "stage_channels", "entries must be positive")
        _check(
            all(a <= b for a, b in zip(self.stage_channels, self.stage_channels[1:])),
            "stage_channels",
            "must be non-decreasing",
        )
        _check(self.embed_dim > 0, "embed_dim", "must be positive")
        _check(self.num_heads > 0, "num_heads", "must be positive")
        _check(
            self.embed_dim % self.num_heads == 0,
            "num_heads",
            f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}",
        )
        _check(self.window_size > 0, "window_size", "must be positive")
        _check(
            0 < self.shift_size < self.window_size,
            "shift_size",
            f"need 0 < shift_size < window_size, got {self.shift_size} vs {self.window_size}",
        )
        _check(self.mlp_ratio > 0, "mlp_ratio", "must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    iterations: int = 3000
    batch_size: int = 4
    patch_size: tuple[int, int, int] = (128, 128, 128)
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    rng_seed: int = 0
    checkpoint_every: int = 500
    validate_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        self.validate()

    def validate(self) -> None:
        for name in ("learning_rate", "weight_decay", "iterations", "batch_size",
                     "lambda_dice", "lambda_ce", "checkpoint_every", "validate_every"):
            _check(getattr(self, name) > 0, name, "must be positive")
        _check(self.rng_seed >= 0, "rng_seed", "must be non-negative")
        _check(len(self.patch_size) == 3, "patch_size", "must have 3 entries")
        _check(
            all(p > 0 and p % 16 == 0 for p in self.patch_size),
            "patch_size",
            f"entries must be positive multiples of 16, got {self.patch_size}",
        )


@dataclass(frozen=True)
class DataConfig:
    target_spacing: float = 1.5
    intensity_window: tuple[float, float] = (-175.0, 250.0)
    pos_neg_ratio: tuple[float, float] = (1.0, 1.0)
    samples_per_volume: int = 4

    def __post_init__(self):
        object.__setattr__(self, "intensity_window", tuple(float(v) for v in self.intensity_window))
        object.__setattr__(self, "pos_neg_ratio", tuple(float(v) for v in self.pos_neg_ratio))
        self.validate()

    def validate(self) -> None:
        _check(self.target_spacing > 0, "target_spacing", "must be positive")
        _check(len(self.intensity_window) == 2, "intensity_window", "must be (lo, hi)")
        lo, hi = self.intensity_window
        _check(lo < hi, "intensity_window", f"need lo < hi, got ({lo}, {hi})")
        _check(len(self.pos_neg_ratio) == 2, "pos_neg_ratio", "must be (pos, neg)")
        _check(all(w >= 0 for w in self.pos_neg_ratio), "pos_neg_ratio", "weights must be >= 0")
        _check(sum(self.pos_neg_ratio) > 0, "pos_neg_ratio", "weights must not both be 0")
        _check(self.samples_per_volume > 0, "samples_per_volume", "must be positive")


_PRESETS = {
    "tiny": dict(stage_depths=(2, 2, 2, 2), stage_channels=(32, 64, 128, 256), embed_dim=48),
    # published as (32, 64, 128, 56); the last entry breaks channel growth
    "small": dict(stage_depths=(3, 4, 6, 3), stage_channels=(32, 64, 128, 256), embed_dim=48),
    "base": dict(stage_depths=(3, 4, 6, 3), stage_channels=(64, 128, 256, 512), embed_dim=48),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, **overrides) -> ModelConfig:
    """Return the model config of a named variant (tiny, small or base)."""
    key = name.lower()
    if key not in _PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}", field_name="preset"
        )
    return ModelConfig(**{**_PRESETS[key], **overrides})


_SECTIONS = (ModelConfig, TrainConfig, DataConfig)


def _field_types() -> dict[str, type]:
    return {f.name: cls for cls in _SECTIONS for f in fields(cls)}


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig, DataConfig]:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"parse error: {exc}", line=line) from exc

    owners = _field_types()
    buckets: dict[type, dict] = {cls: {} for cls in _SECTIONS}
    preset_name = raw.pop("preset", "base")
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"{key}: tables are not supported, keys must be flat", field_name=key)
        if key not in owners:
            raise ConfigError(f"unknown key {key!r}", field_name=key)
        buckets[owners[key]][key] = value

    try:
        model = preset(str(preset_name), **buckets[ModelConfig])
        train = TrainConfig(**buckets[TrainConfig])
        data = DataConfig(**buckets[DataConfig])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return model, train, data


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig, DataConfig]:
    """Read a flat TOML config; unset keys fall back to the defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def _toml_value(value) -> str:
    if isinstance(value, enum.Enum):
        value = value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(model: ModelConfig, train: TrainConfig | None = None,
                     data: DataConfig | None = None) -> str:
    lines = []
    for cfg in (model, train or TrainConfig(), data or DataConfig()):
        lines.append(f"# {type(cfg).__name__}")
        for f in fields(cfg):
            lines.append(f"{f.name} = {_toml_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_to_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    for key, value in out.items():
        if isinstance(value, enum.Enum):
            out[key] = value.value
        elif isinstance(value, tuple):
            out[key] = list(value)
    return out
