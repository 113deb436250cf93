"""Model configuration and named presets."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .tensor import ConfigError

VARIANTS = ("parallel", "cascaded")
SPN_MODES = ("nonlocal", "fixed_local")


@dataclass
class ModelConfig:
    name: str = "custom"
    # JCAT stages 2-5
    depths: list = field(default_factory=lambda: [3, 3, 6, 3])
    channels: list = field(default_factory=lambda: [64, 128, 320, 512])
    num_heads: list = field(default_factory=lambda: [1, 2, 5, 8])
    sr_ratios: list = field(default_factory=lambda: [8, 4, 2, 1])
    variant: str = "parallel"
    ffn_expansion: int = 4
    # RGB/depth embedding and the ResNet stage
    rgb_channels: int = 48
    depth_channels: int = 16
    stem_channels: int = 64
    f1_channels: int = 128
    stem_blocks: int = 3
    f1_blocks: int = 4
    # dec6 .. dec2 output widths
    decoder_channels: list = field(default_factory=lambda: [256, 128, 64, 64, 64])
    # canonical input size the position tables are laid out for
    pos_grid: list = field(default_factory=lambda: [256, 320])
    cbam_reduction: int = 16
    cbam_min_hidden: int = 4
    cbam_kernel: int = 7
    bn_momentum: float = 0.1
    ln_eps: float = 1e-5
    spn_iterations: int = 6
    spn_neighbors: int = 8
    spn_mode: str = "nonlocal"

    def __post_init__(self):
        self.validate()

    @property
    def embed_channels(self) -> int:
        return self.rgb_channels + self.depth_channels

    def validate(self) -> None:
        for key in ("depths", "channels", "num_heads", "sr_ratios"):
            if len(getattr(self, key)) != 4:
                raise ConfigError(f"{key} must have 4 entries")
        for c, h in zip(self.channels, self.num_heads):
            if c % h:
                raise ConfigError(f"channels {c} not divisible by heads {h}")
        for r in self.sr_ratios:
            if r not in (1, 2, 4, 8):
                raise ConfigError(f"sr_ratio {r} not in {{1,2,4,8}}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.spn_mode not in SPN_MODES:
            raise ConfigError(f"spn_mode must be one of {SPN_MODES}")
        if len(self.decoder_channels) != 5:
            raise ConfigError("decoder_channels must have 5 entries (dec6..dec2)")
        if self.spn_iterations < 0 or self.spn_neighbors < 1:
            raise ConfigError("spn_iterations must be >= 0 and spn_neighbors >= 1")
        if self.ffn_expansion < 1:
            raise ConfigError("ffn_expansion must be >= 1")
        if len(self.pos_grid) != 2 or any(g % 32 for g in self.pos_grid):
            raise ConfigError("pos_grid must be two multiples of 32")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in d.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _full(name: str, depths: list) -> ModelConfig:
    return ModelConfig(name=name, depths=depths)


PRESETS = {
    "tiny": lambda: _full("tiny", [2, 2, 2, 2]),
    "small": lambda: _full("small", [3, 3, 6, 3]),
    "base": lambda: _full("base", [3, 3, 18, 3]),
    "nano": lambda: ModelConfig(
        name="nano", depths=[1, 1, 1, 1], channels=[16, 32, 48, 64], num_heads=[1, 2, 3, 4],
        sr_ratios=[4, 2, 2, 1], ffn_expansion=2, rgb_channels=12, depth_channels=4,
        stem_channels=16, f1_channels=32, stem_blocks=1, f1_blocks=2,
        decoder_channels=[64, 32, 16, 16, 16], pos_grid=[64, 64]),
    "micro": lambda: ModelConfig(
        name="micro", depths=[1, 1, 1, 1], channels=[4, 4, 4, 4], num_heads=[1, 1, 1, 1],
        sr_ratios=[4, 2, 2, 1], ffn_expansion=2, rgb_channels=3, depth_channels=1,
        stem_channels=4, f1_channels=4, stem_blocks=1, f1_blocks=1,
        decoder_channels=[4, 4, 4, 4, 4], pos_grid=[32, 32], spn_iterations=2),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


def resolve(spec) -> ModelConfig:
    """Accept a preset name, a dict (optionally with a ``preset`` base) or a config."""
    if isinstance(spec, ModelConfig):
        return spec
    if isinstance(spec, str):
        return preset(spec)
    if isinstance(spec, dict):
        spec = dict(spec)
        base = spec.pop("preset", None)
        if base is None:
            return ModelConfig.from_dict(spec)
        d = preset(base).to_dict()
        d.update(spec)
        return ModelConfig.from_dict(d)
    raise ConfigError(f"cannot build a ModelConfig from {type(spec).__name__}")
