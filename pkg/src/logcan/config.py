"""Model/training configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

logger = logging.getLogger(__name__)

# Channel plan of the four backbone stages at width factor 1 (ResNet-50 shaped).
STAGE_CHANNELS = (256, 512, 1024, 2048)
STEM_CHANNELS = 64
STAGE_STRIDES = (4, 8, 16, 32)


class ConfigError(ValueError):
    pass


def parse_grid(text: str) -> tuple[int, int]:
    """``"4x4"`` (or a single ``"4"``) -> ``(4, 4)``."""
    parts = str(text).lower().replace(",", "x").split("x")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad grid {text!r}; expected e.g. 4x4") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise ConfigError(f"bad grid {text!r}; expected two positive integers")
    return vals


def scaled_width(channels: int, width_factor: float) -> int:
    return max(1, int(round(channels * width_factor)))


@dataclass(frozen=True)
class ModelConfig:
    classes: int = 6
    width_factor: float = 0.125
    d: int = 40
    grids: tuple[tuple[int, int], ...] = field(default=((4, 4),) * 4)
    aux_weight: float = 0.4
    seed: int = 42
    base_lr: float = 0.01
    momentum: float = 0.9
    power: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.classes < 1:
            raise ConfigError(f"classes must be positive, got {self.classes}")
        if self.d < self.classes:
            raise ConfigError(f"working width d={self.d} must be >= classes={self.classes}")
        if self.width_factor <= 0:
            raise ConfigError(f"width_factor must be positive, got {self.width_factor}")
        if len(self.grids) != 4:
            raise ConfigError(f"need one grid per stage, got {len(self.grids)}")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(scaled_width(c, self.width_factor) for c in STAGE_CHANNELS)

    @property
    def stem_channels(self) -> int:
        return scaled_width(STEM_CHANNELS, self.width_factor)

    def stage_extents(self, height: int, width: int) -> list[tuple[int, int]]:
        if height % 32 or width % 32:
            raise ConfigError(f"input extents {height}x{width} must be divisible by 32")
        return [(height // s, width // s) for s in STAGE_STRIDES]

    def effective_grids(self, height: int, width: int) -> list[tuple[int, int]]:
        """Per-stage grids; a stage too small for (or not divisible by) its grid uses 1x1."""
        out = []
        for i, ((h, w), (gh, gw)) in enumerate(zip(self.stage_extents(height, width), self.grids), 1):
            if h < gh or w < gw or h % gh or w % gw:
                logger.info("stage %d: extents %dx%d cannot hold grid %dx%d, using 1x1", i, h, w, gh, gw)
                out.append((1, 1))
            else:
                out.append((gh, gw))
        return out

    def with_updates(self, **kw) -> "ModelConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # -- text format --------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if key == "grids":
                for i, (gh, gw) in enumerate(value, 1):
                    lines.append(f"grid_stage{i} = {gh}x{gw}")
            else:
                lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        grids = list(cls().grids)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("grid_stage") and key[len("grid_stage"):] in {"1", "2", "3", "4"}:
                grids[int(key[-1]) - 1] = parse_grid(value)
            elif key in types and key != "grids":
                conv = int if types[key] in (int, "int") else float
                try:
                    values[key] = conv(value)
                except ValueError:
                    raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        return cls(grids=tuple(grids), **values)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def default_config() -> ModelConfig:
    """The shipped configuration (``default.cfg``)."""
    text = resources.files("logcan").joinpath("default.cfg").read_text(encoding="utf-8")
    return ModelConfig.from_text(text)
