"""Serializable run configuration: architecture, schedule, training, ablation.

Precedence is flags > config file > defaults. Loading rejects unknown keys
(typos fail loudly instead of silently training the wrong model) and reports
JSON syntax errors with line/column. Defaults carry the published training
recipe where one exists: 20 sampler steps, guidance 5, 20% caption dropout,
align pretrain LR 5e-5, joint LRs 5e-6 (encoder) / 1e-5 (everything else),
cosine annealing.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

__all__ = ["ModelConfig", "DEFAULT_PRESETS", "ConfigError", "config_help"]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


# Degradation severity presets: blur sigma range, total downscale factor,
# additive noise sigma range (units of [0,1] pixel range), compression
# quality range, and how many degradation rounds run before the final
# upscale back to source resolution.
DEFAULT_PRESETS: dict[str, dict[str, Any]] = {
    "I": {"blur": [0.2, 1.0], "scale": 2, "noise": [0.0, 5 / 255], "quality": [80, 95], "orders": 1},
    "II": {"blur": [0.5, 2.0], "scale": 4, "noise": [2 / 255, 10 / 255], "quality": [60, 85], "orders": 1},
    "III": {"blur": [1.0, 3.0], "scale": 4, "noise": [5 / 255, 20 / 255], "quality": [30, 70], "orders": 2},
}


@dataclass
class ModelConfig:
    # architecture
    image_size: int = 32          # HQ canvas, pixels per side
    c_pen: int = 64               # penultimate encoder width (LQ feature tap)
    c_lat: int = 4                # latent width
    c_align: int = 4              # aligned-feature width fed to the denoiser
    align_conv_width: int = 32    # conv_x / conv_m output width in the alignment module
    align_heads: int = 1
    unet_base: int = 32           # denoiser base width
    unet_mult: int = 2            # channel multiplier for the second level
    unet_heads: int = 1
    ff_mult: int = 2              # transformer feed-forward expansion
    t_dim: int = 64               # timestep embedding width after the MLP
    text_dim: int = 32            # caption token embedding width
    text_len: int = 4             # caption length after pad/truncate
    # diffusion schedule
    sched_t: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    # sampling
    steps: int = 20
    cfg_scale: float = 5.0
    # training
    vae_iters: int = 2000
    prior_iters: int = 1500
    align_iters: int = 1000
    joint_iters: int = 4000
    batch: int = 8
    lr_vae: float = 3e-4
    lr_prior: float = 3e-4
    lr_align: float = 5e-5
    lr_unet: float = 1e-5
    lr_encoder: float = 5e-6
    dropout: float = 0.2
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    # ablation wiring
    align: str = "full"           # full | add | none
    ablation: str = "none"
    # degradation severity presets (see DEFAULT_PRESETS)
    degrade_presets: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_PRESETS))

    _ALIGN_VALUES = ("full", "add", "none")
    _ABLATION_VALUES = (
        "none",
        "wo_align",
        "wo_pretrain_align",
        "last_feats",
        "ft_en_fix_dm",
        "fix_en_ft_dm",
        "ft_en_dm_sp",
    )

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError(f"dropout must lie in [0,1], got {self.dropout}")
        if self.align not in self._ALIGN_VALUES:
            raise ConfigError(f"align must be one of {self._ALIGN_VALUES}, got {self.align!r}")
        if self.ablation not in self._ABLATION_VALUES:
            raise ConfigError(f"ablation must be one of {self._ABLATION_VALUES}, got {self.ablation!r}")
        if self.image_size % 4:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.sched_t < 1:
            raise ConfigError(f"sched_t must be positive, got {self.sched_t}")
        if not 0.0 < self.beta_min < self.beta_max < 1.0:
            raise ConfigError(
                f"need 0 < beta_min < beta_max < 1, got {self.beta_min}, {self.beta_max}"
            )
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        for level in ("I", "II", "III"):
            if level not in self.degrade_presets:
                raise ConfigError(f"degrade_presets missing level {level!r}")

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def with_overrides(self, overrides: dict) -> "ModelConfig":
        """Flag-level overrides; None values are ignored."""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in data:
                raise ConfigError(f"unknown config key: {key}")
            data[key] = value
        return type(self).from_dict(data)


def config_help() -> str:
    """One line per config key with its default, for --help output."""
    cfg = ModelConfig()
    lines = ["config keys (JSON file via --config; defaults shown):"]
    for f in fields(ModelConfig):
        default = getattr(cfg, f.name)
        if f.name == "degrade_presets":
            default = "severity presets I/II/III (see README)"
        lines.append(f"  {f.name} = {default}")
    return "\n".join(lines)
