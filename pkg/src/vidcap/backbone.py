"""Trainable hierarchical video feature extractor.

A small stand-in for a full video transformer that keeps the multi-scale
output contract: patch embedding to stride 4, then four stages whose
spatial strides follow the 4/8/16/32 ladder with channel doubling. Each
stage is a residual per-position feed-forward mixer; stages two to four
prepend a 2x2 patch merge. Only the output shapes matter downstream, so
the blocks stay cheap enough to train on a CPU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import VideoClip
from .tensor import DimensionError, ParamStore, Tensor, add, gelu, init_uniform, linear, reshape, transpose

PATCH_T, PATCH_S = 2, 4  # temporal x spatial patch extents
PATCH_INPUTS = PATCH_T * PATCH_S * PATCH_S * 3


@dataclass
class FeaturePyramid:
    """Per-stage grid feature maps, temporally aligned, spatially strided."""

    stages: list[Tensor]  # stage m: [..., T/2, H/s_m, W/s_m, C_m]


def init_backbone_params(store: ParamStore, cfg: RunConfig, rng: np.random.Generator, dtype) -> None:
    widths = cfg.stage_channels
    store.add("backbone.patch_embed.w", init_uniform(rng, (PATCH_INPUTS, widths[0]), PATCH_INPUTS, dtype))
    store.add("backbone.patch_embed.b", np.zeros(widths[0], dtype=dtype))
    for m in range(1, cfg.stages + 1):
        prev = widths[m - 2] if m >= 2 else widths[0]
        width = prev  # mixer runs at the incoming width; the merge widens
        hidden = cfg.backbone_ffn_ratio * width
        prefix = f"backbone.stage{m}"
        store.add(f"{prefix}.mix1.w", init_uniform(rng, (width, hidden), width, dtype))
        store.add(f"{prefix}.mix1.b", np.zeros(hidden, dtype=dtype))
        store.add(f"{prefix}.mix2.w", init_uniform(rng, (hidden, width), hidden, dtype))
        store.add(f"{prefix}.mix2.b", np.zeros(width, dtype=dtype))
        if m >= 2:
            store.add(
                f"{prefix}.merge.w",
                init_uniform(rng, (4 * prev, widths[m - 1]), 4 * prev, dtype),
            )
            store.add(f"{prefix}.merge.b", np.zeros(widths[m - 1], dtype=dtype))


def clip_to_patches(frames: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Normalise pixels to [0, 1] and regroup into non-overlapping
    2x4x4 spatio-temporal patches: [T/2, H/4, W/4, 96].

    Pure numpy on the constant input; cacheable per clip.
    """
    t, h, w, c = frames.shape
    if t % PATCH_T or h % PATCH_S or w % PATCH_S:
        raise DimensionError(f"clip shape {frames.shape} not divisible into {PATCH_T}x{PATCH_S}x{PATCH_S} patches")
    x = frames.astype(dtype) / 255.0
    x = x.reshape(t // PATCH_T, PATCH_T, h // PATCH_S, PATCH_S, w // PATCH_S, PATCH_S, c)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x.reshape(t // PATCH_T, h // PATCH_S, w // PATCH_S, PATCH_INPUTS))


def patch_embed(patches: Tensor, params: ParamStore) -> Tensor:
    """Project patch vectors to the first stage width."""
    return linear(patches, params["backbone.patch_embed.w"], params["backbone.patch_embed.b"])


def _patch_merge(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Concatenate each 2x2 spatial neighbourhood's channels and project."""
    *lead, t, h, w_ext, c = x.shape
    if h % 2 or w_ext % 2:
        raise DimensionError(f"cannot 2x2-merge odd spatial extents in shape {x.shape}")
    lead = tuple(lead)
    x = reshape(x, lead + (t, h // 2, 2, w_ext // 2, 2, c))
    n = len(lead)
    x = transpose(x, tuple(range(n)) + (n, n + 1, n + 3, n + 2, n + 4, n + 5))
    x = reshape(x, lead + (t, h // 2, w_ext // 2, 4 * c))
    return linear(x, w, b)


def stage_block(x: Tensor, m: int, params: ParamStore, cfg: RunConfig) -> Tensor:
    """Residual feed-forward mixer; stages >= 2 finish with a 2x2 merge."""
    widths = cfg.stage_channels
    expected = widths[m - 2] if m >= 2 else widths[0]
    if x.shape[-1] != expected:
        raise DimensionError(
            f"stage {m} expects channel width {expected}, got input shape {x.shape}"
        )
    prefix = f"backbone.stage{m}"
    hidden = gelu(linear(x, params[f"{prefix}.mix1.w"], params[f"{prefix}.mix1.b"]))
    mixed = linear(hidden, params[f"{prefix}.mix2.w"], params[f"{prefix}.mix2.b"])
    x = add(x, mixed)
    if m >= 2:
        x = _patch_merge(x, params[f"{prefix}.merge.w"], params[f"{prefix}.merge.b"])
    return x


def forward_pyramid(patches: Tensor, params: ParamStore, cfg: RunConfig) -> FeaturePyramid:
    """Run all stages on pre-extracted patches (any leading batch dims)."""
    x = patch_embed(patches, params)
    stages = []
    for m in range(1, cfg.stages + 1):
        x = stage_block(x, m, params, cfg)
        stages.append(x)
    return FeaturePyramid(stages=stages)


def extract_pyramid(clip: VideoClip, params: ParamStore, cfg: RunConfig) -> FeaturePyramid:
    """Full extractor for a single clip; returns every stage output."""
    dtype = params["backbone.patch_embed.w"].dtype
    patches = Tensor(clip_to_patches(clip.frames, dtype=dtype))
    return forward_pyramid(patches, params, cfg)
