"""Run configuration: model shape, training schedule, generation settings.

Two presets are bundled. ``toy`` trains end to end in minutes on a CPU;
``paper`` mirrors the published operating point (32 frames at 224x224,
768-wide decoder, grid cell 4, mask threshold 0.3, beam 4).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; message carries every detected problem."""


@dataclass
class RunConfig:
    preset: str = "toy"

    # model shape
    frames: int = 8                    # raw frames per clip (T)
    height: int = 64
    width: int = 64
    base_channels: int = 8             # first backbone stage width
    fused_channels: int = 32           # channel width of the fused feature map
    stages: int = 4                    # backbone stages / pyramid depth
    hidden_dim: int = 64               # decoder token width
    layers: int = 4                    # decoder depth
    heads: int = 4
    ffn_ratio: int = 4                 # decoder feed-forward expansion
    backbone_ffn_ratio: int = 2        # backbone mixer expansion
    enhanced_attention: bool = True    # gated query/key context mixing

    # region masking
    grid_cell: int = 1                 # feature cells per grid cell side
    min_region_width: int = 2          # smallest region width, grid units
    min_region_height: int = 2         # smallest region height, grid units
    mask_area_threshold: float = 0.3   # masked fraction ceiling per frame
    feature_masking: bool = True

    # training
    learning_rate: float = 2e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.05
    batch_size: int = 6
    accumulation_steps: int = 4
    max_epochs: int = 50
    max_steps: int | None = None
    mask_rate: float = 0.5             # caption token corruption probability
    max_caption_len: int = 50
    backbone_lr_scale: float = 0.05
    seed: int = 0
    checkpoint_every: int = 500
    stop_loss: float | None = None     # optional early stop on mean step loss

    # generation
    beam_size: int = 4
    max_generate_len: int = 20

    def validate(self) -> None:
        """Raise ConfigError listing every violated constraint at once."""
        errors: list[str] = []
        if self.preset not in ("toy", "paper", "custom"):
            errors.append(f"preset must be toy, paper or custom, got {self.preset!r}")
        if self.frames < 4 or self.frames % 2:
            errors.append(f"frames must be even and >= 4, got {self.frames}")
        for name in ("height", "width"):
            value = getattr(self, name)
            if value % 32:
                errors.append(f"{name} must be divisible by 32, got {value}")
        if self.stages != 4:
            errors.append(f"exactly 4 backbone stages are supported, got {self.stages}")
        if self.fused_channels % self.stages:
            errors.append(
                f"fused_channels must be divisible by {self.stages}, got {self.fused_channels}"
            )
        if self.hidden_dim % self.heads:
            errors.append(
                f"hidden_dim {self.hidden_dim} must be divisible by heads {self.heads}"
            )
        fused_h, fused_w = self.height // 8, self.width // 8
        if fused_h % 4 or fused_w % 4:
            errors.append(
                f"fused map {fused_h}x{fused_w} must be divisible by the pooling stride 4"
            )
        if fused_h % self.grid_cell or fused_w % self.grid_cell:
            errors.append(
                f"fused map {fused_h}x{fused_w} must be divisible by grid_cell {self.grid_cell}"
            )
        if not 0.0 <= self.mask_rate <= 1.0:
            errors.append(f"mask_rate must lie in [0, 1], got {self.mask_rate}")
        if not 0.0 <= self.mask_area_threshold <= 1.0:
            errors.append(
                f"mask_area_threshold must lie in [0, 1], got {self.mask_area_threshold}"
            )
        if self.learning_rate <= 0:
            errors.append(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            errors.append(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.weight_decay < 0:
            errors.append(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.accumulation_steps < 1:
            errors.append(f"accumulation_steps must be >= 1, got {self.accumulation_steps}")
        if self.backbone_lr_scale < 0:
            errors.append(f"backbone_lr_scale must be >= 0, got {self.backbone_lr_scale}")
        if self.beam_size < 1:
            errors.append(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_generate_len < 1:
            errors.append(f"max_generate_len must be >= 1, got {self.max_generate_len}")
        if self.max_generate_len + 2 > self.max_caption_len:
            errors.append(
                f"max_generate_len {self.max_generate_len} + frame tokens exceed "
                f"max_caption_len {self.max_caption_len}"
            )
        if errors:
            raise ConfigError("; ".join(errors))

    # derived shapes -------------------------------------------------------

    @property
    def temporal_tokens(self) -> int:
        return self.frames // 2 - 1

    @property
    def visual_tokens(self) -> int:
        return self.temporal_tokens * (self.height // 32) * (self.width // 32)

    @property
    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2**m for m in range(self.stages)]

    @property
    def stage_strides(self) -> list[int]:
        return [4, 8, 16, 32]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        preset = raw.get("preset", "toy")
        base = paper_config() if preset == "paper" else toy_config()
        base.preset = preset
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        for key, value in raw.items():
            setattr(base, key, value)
        base.validate()
        return base

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError(f"configuration file {path} must contain a JSON object")
        return cls.from_dict(raw)


def toy_config() -> RunConfig:
    """Desk-scale preset: 8-frame 64x64 clips, 64-wide decoder.

    The learning rate is the reference 4e-5 scaled up 50x; at toy widths
    the reference rate cannot overfit a handful of clips within a sensible
    step budget.
    """
    return RunConfig()


def paper_config() -> RunConfig:
    """Published operating point for shape checks (not trainable on a desk)."""
    return RunConfig(
        preset="paper",
        frames=32,
        height=224,
        width=224,
        base_channels=96,
        fused_channels=384,
        hidden_dim=768,
        layers=4,
        heads=12,
        grid_cell=4,
        min_region_width=2,
        min_region_height=2,
        mask_area_threshold=0.3,
        learning_rate=4e-5,
        warmup_ratio=0.1,
        weight_decay=0.05,
        batch_size=6,
        accumulation_steps=4,
        max_epochs=50,
        mask_rate=0.5,
        max_caption_len=50,
        backbone_lr_scale=0.05,
        beam_size=4,
        max_generate_len=20,
    )
