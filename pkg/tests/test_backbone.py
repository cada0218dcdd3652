"""Tests for the hierarchical feature extractor."""

import numpy as np
import pytest

from vidcap import tensor as T
from vidcap.backbone import (
    PATCH_INPUTS,
    clip_to_patches,
    extract_pyramid,
    forward_pyramid,
    init_backbone_params,
    patch_embed,
    stage_block,
)
from vidcap.config import RunConfig, toy_config
from vidcap.data import SynthSpec, VideoClip, generate_clip
from vidcap.tensor import DimensionError, ParamStore, Tensor, grad_check


def make_params(cfg, seed=0, dtype=np.float32):
    store = ParamStore()
    init_backbone_params(store, cfg, np.random.default_rng(seed), dtype)
    return store


class TestPatchEmbed:
    def test_toy_output_shape(self):
        cfg = toy_config()
        params = make_params(cfg)
        clip, _ = generate_clip(SynthSpec(), 0)
        patches = Tensor(clip_to_patches(clip.frames))
        out = patch_embed(patches, params)
        assert out.shape == (4, 16, 16, cfg.base_channels)

    def test_all_black_clip_zero_bias_gives_zero(self):
        cfg = toy_config()
        params = make_params(cfg)
        frames = np.zeros((8, 64, 64, 3), dtype=np.uint8)
        out = patch_embed(Tensor(clip_to_patches(frames)), params)
        assert np.array_equal(out.data, np.zeros_like(out.data))

    def test_hand_affine_on_ones_patch(self):
        # One 2x4x4 patch of raw value 1: normalised inputs are 1/255 each,
        # and uniform 1/96 weights average them back to 1/255 per channel.
        cfg = toy_config()
        params = make_params(cfg)
        params["backbone.patch_embed.w"].data[:] = 1.0 / PATCH_INPUTS
        frames = np.ones((2, 4, 4, 3), dtype=np.float64)
        patches = Tensor(clip_to_patches(frames, dtype=np.float64))
        w = Tensor(np.full((PATCH_INPUTS, 4), 1.0 / PATCH_INPUTS))
        out = T.linear(patches, w)
        assert np.allclose(out.data, 1.0 / 255.0, atol=1e-12)

    def test_indivisible_extents_rejected(self):
        with pytest.raises(DimensionError):
            clip_to_patches(np.zeros((3, 64, 64, 3), dtype=np.uint8))


class TestStageBlock:
    def test_merge_halves_spatial_and_doubles_channels(self):
        cfg = toy_config()
        params = make_params(cfg)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 16, 16, cfg.base_channels)).astype(np.float32))
        out = stage_block(x, 2, params, cfg)
        assert out.shape == (4, 8, 8, 2 * cfg.base_channels)

    def test_first_stage_preserves_extents(self):
        cfg = toy_config()
        params = make_params(cfg)
        x = Tensor(np.random.default_rng(1).normal(size=(4, 16, 16, cfg.base_channels)).astype(np.float32))
        out = stage_block(x, 1, params, cfg)
        assert out.shape == x.shape

    def test_zero_mixer_leaves_residual_then_merge(self):
        cfg = toy_config()
        params = make_params(cfg, seed=3)
        for name in ("mix1.w", "mix1.b", "mix2.w", "mix2.b"):
            params[f"backbone.stage2.{name}"].data[:] = 0.0
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 4, 4, cfg.base_channels)).astype(np.float32)
        out = stage_block(Tensor(x), 2, params, cfg)

        # Hand patch-merge oracle: concatenate 2x2 neighbourhood channels
        # (row-major) and apply the merge projection.
        c = cfg.base_channels
        merged = np.zeros((2, 2, 2, 4 * c), dtype=np.float32)
        for i in range(2):
            for j in range(2):
                block = x[:, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2, :]
                merged[:, i, j, :] = block.reshape(2, 4 * c)
        expected = merged @ params["backbone.stage2.merge.w"].data + params["backbone.stage2.merge.b"].data
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_wrong_input_width_rejected(self):
        cfg = toy_config()
        params = make_params(cfg)
        with pytest.raises(DimensionError, match="stage 2"):
            stage_block(Tensor(np.zeros((4, 16, 16, 5), dtype=np.float32)), 2, params, cfg)


class TestExtractPyramid:
    def test_published_frame_and_size_settings(self):
        # 32 frames at 224x224 walk the 4/8/16/32 stride ladder.
        cfg = RunConfig(frames=32, height=224, width=224, base_channels=4, fused_channels=16)
        params = make_params(cfg)
        clip = VideoClip(np.zeros((32, 224, 224, 3), dtype=np.uint8), "big")
        with T.no_grad():
            pyr = extract_pyramid(clip, params, cfg)
        shapes = [s.shape for s in pyr.stages]
        assert shapes == [
            (16, 56, 56, 4),
            (16, 28, 28, 8),
            (16, 14, 14, 16),
            (16, 7, 7, 32),
        ]

    def test_toy_shapes(self):
        cfg = toy_config()
        params = make_params(cfg)
        clip, _ = generate_clip(SynthSpec(), 1)
        pyr = extract_pyramid(clip, params, cfg)
        spatial = [s.shape[1:3] for s in pyr.stages]
        assert spatial == [(16, 16), (8, 8), (4, 4), (2, 2)]
        assert all(s.shape[0] == 4 for s in pyr.stages)

    def test_determinism(self):
        cfg = toy_config()
        params = make_params(cfg)
        clip, _ = generate_clip(SynthSpec(seed=7), 2)
        a = extract_pyramid(clip, params, cfg)
        b = extract_pyramid(clip, params, cfg)
        for sa, sb in zip(a.stages, b.stages):
            assert np.array_equal(sa.data, sb.data)

    def test_shape_contract_across_random_clips(self):
        rng = np.random.default_rng(11)
        for _ in range(6):
            t = int(rng.choice([4, 8, 12]))
            h = int(rng.choice([32, 64, 96]))
            w = int(rng.choice([32, 64]))
            cfg = RunConfig(frames=t, height=h, width=w, base_channels=4, fused_channels=16)
            params = make_params(cfg)
            frames = rng.integers(0, 256, size=(t, h, w, 3), dtype=np.uint8)
            with T.no_grad():
                pyr = extract_pyramid(VideoClip(frames, "r"), params, cfg)
            for m, stage in enumerate(pyr.stages, start=1):
                stride = cfg.stage_strides[m - 1]
                assert stage.shape == (t // 2, h // stride, w // stride, cfg.stage_channels[m - 1])

    def test_batched_leading_dim(self):
        cfg = toy_config()
        params = make_params(cfg)
        rng = np.random.default_rng(0)
        clips = [generate_clip(SynthSpec(seed=1), i)[0] for i in range(2)]
        batch = np.stack([clip_to_patches(c.frames) for c in clips])
        pyr = forward_pyramid(Tensor(batch), params, cfg)
        assert pyr.stages[-1].shape == (2, 4, 2, 2, 8 * cfg.base_channels)
        single = forward_pyramid(Tensor(clip_to_patches(clips[0].frames)), params, cfg)
        assert np.allclose(pyr.stages[-1].data[0], single.stages[-1].data, atol=1e-6)


class TestGradients:
    def test_two_stage_micro_gradcheck(self):
        cfg = RunConfig(frames=4, height=32, width=32, base_channels=4, fused_channels=16)
        store = ParamStore()
        init_backbone_params(store, cfg, np.random.default_rng(0), np.float64)
        frames = np.random.default_rng(1).integers(0, 256, size=(4, 32, 32, 3), dtype=np.uint8)
        patches = Tensor(clip_to_patches(frames, dtype=np.float64))
        probe = None

        def f(s):
            x = patch_embed(patches, s)
            x = stage_block(x, 1, s, cfg)
            x = stage_block(x, 2, s, cfg)
            nonlocal probe
            if probe is None:
                probe = Tensor(np.random.default_rng(2).normal(size=x.shape))
            return T.sum_all(T.mul(x, probe))

        report = grad_check(f, store, samples_per_param=6)
        assert report.max_rel_error < 1e-3, report.per_param
