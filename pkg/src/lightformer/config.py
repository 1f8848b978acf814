"""Model/training configuration and the flat ``key = value`` file format."""
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    buffer_size: int = 10
    embed_dim: int = 256
    num_heads: int = 4
    num_points: int = 4
    history_mode: str = "all"
    centres_per_class: int = 1
    margin: float = 0.5
    scale: float = 64.0
    in_channels: int = 3
    stem_width: int = 8
    stage_widths: tuple = (8, 16, 32, 64)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    image_height: int = 512
    image_width: int = 960
    ablate_tsa: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("buffer_size", "embed_dim", "num_heads", "num_points", "centres_per_class",
                     "in_channels", "stem_width", "image_height", "image_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})")
        if self.history_mode not in ("all", "last"):
            raise ConfigError(f"history_mode must be 'all' or 'last', got {self.history_mode!r}")
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ConfigError("stage_widths and blocks_per_stage must have equal length")
        if any(v < 1 for v in (*self.stage_widths, *self.blocks_per_stage)):
            raise ConfigError("backbone widths and block counts must be positive")
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.margin < 0:
            raise ConfigError(f"margin must be non-negative, got {self.margin}")

    @property
    def downsample(self):
        return 2 ** (1 + len(self.stage_widths))

    @property
    def feature_size(self):
        h, w = self.image_height, self.image_width
        for _ in range(1 + len(self.stage_widths)):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    learning_rate: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(field_type, key, raw):
    raw = raw.strip()
    try:
        if field_type in (bool, "bool"):
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if field_type in (int, "int"):
            return int(raw)
        if field_type in (float, "float"):
            return float(raw)
        if field_type in (tuple, "tuple"):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def config_fields(cls):
    return {f.name: f.type for f in fields(cls)}


def to_lines(cfg):
    return [f"{f.name}={_format(getattr(cfg, f.name))}" for f in fields(cfg)]


def from_mapping(cls, mapping):
    """Build ``cls`` from string values; unknown keys are rejected."""
    types = config_fields(cls)
    kwargs = {}
    for key, raw in mapping.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = raw if not isinstance(raw, str) else _parse(types[key], key, raw)
    return cls(**kwargs)


def parse_key_values(text, source="<config>"):
    """Parse ``key = value`` lines with ``#`` comments into an ordered dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


MODEL_KEYS = set(config_fields(ModelConfig))
TRAIN_KEYS = set(config_fields(TrainConfig))


def load_run_config(path=None, overrides=None):
    """Read a combined model+training config file and apply overrides.

    Returns ``(ModelConfig, TrainConfig)``. ``seed`` feeds both. Any key that
    belongs to neither is an error.
    """
    values = {}
    if path is not None:
        values.update(parse_key_values(Path(path).read_text(encoding="utf-8"), str(path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(values) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    model = from_mapping(ModelConfig, {k: v for k, v in values.items() if k in MODEL_KEYS})
    train = from_mapping(TrainConfig, {k: v for k, v in values.items() if k in TRAIN_KEYS})
    return model, train


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
