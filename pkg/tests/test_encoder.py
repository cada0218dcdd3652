"""Tests for pyramid fusion, region masking and final pooling."""

import numpy as np
import pytest

from vidcap import tensor as T
from vidcap.backbone import FeaturePyramid
from vidcap.config import RunConfig, toy_config
from vidcap.encoder import (
    MaskPlan,
    Region,
    RegionConfigError,
    apply_mask,
    catalog_for,
    enumerate_regions,
    fuse_pyramid,
    init_fusion_params,
    mask_multiplier,
    pool_final,
    sample_mask_plan,
)
from vidcap.tensor import ParamStore, Tensor, grad_check


def brute_force_regions(grid_rows, grid_cols, dx, dy, cell, threshold):
    """Independent quadruple-loop enumerator over every candidate tuple."""
    found = set()
    canvas = (grid_rows * cell) * (grid_cols * cell)
    for i in range(0, grid_rows + 2):
        for j in range(0, grid_cols + 2):
            for h in range(1, grid_rows + 2):
                for w in range(1, grid_cols + 2):
                    if i < 1 or j < 1:
                        continue
                    if i + h * dy >= grid_rows or j + w * dx >= grid_cols:
                        continue
                    area = (h * dy * cell) * (w * dx * cell)
                    if area < threshold * canvas:
                        found.add((i, j, h, w))
    return found


class TestEnumerateRegions:
    def test_zero_threshold_gives_empty_catalog(self):
        catalog = enumerate_regions(7, 7, 2, 2, 4, 0.0)
        assert len(catalog) == 0

    def test_oversized_minimum_extent_gives_empty_catalog(self):
        catalog = enumerate_regions(5, 5, 5, 5, 1, 1.0)
        assert len(catalog) == 0

    def test_seven_grid_reference_count(self):
        # Pre-verified by the brute-force oracle: 6x6 anchor/extent pairs
        # minus the 4 double-size combinations excluded by the 0.3 area cap.
        catalog = enumerate_regions(7, 7, 2, 2, 4, 0.3)
        assert len(catalog) == 32
        assert len(catalog) == len(brute_force_regions(7, 7, 2, 2, 4, 0.3))

    def test_matches_brute_force_on_random_configurations(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            grid_rows = int(rng.integers(2, 13))
            grid_cols = int(rng.integers(2, 13))
            dx = int(rng.integers(1, 5))
            dy = int(rng.integers(1, 5))
            cell = int(rng.integers(1, 5))
            threshold = float(rng.integers(0, 11)) / 10.0
            catalog = enumerate_regions(grid_rows, grid_cols, dx, dy, cell, threshold)
            got = {(r.row, r.col, r.height_units, r.width_units) for r in catalog.regions}
            expected = brute_force_regions(grid_rows, grid_cols, dx, dy, cell, threshold)
            assert got == expected, (grid_rows, grid_cols, dx, dy, cell, threshold)
            assert len(got) == len(catalog.regions)  # no duplicates

    def test_lexicographic_ordering(self):
        catalog = enumerate_regions(7, 7, 2, 2, 4, 0.3)
        keys = [(r.row, r.col, r.height_units, r.width_units) for r in catalog.regions]
        assert keys == sorted(keys)


class TestSampleMaskPlan:
    def test_zero_frames_gives_empty_plan(self):
        catalog = enumerate_regions(7, 7, 2, 2, 4, 0.3)
        plan = sample_mask_plan(catalog, 0, np.random.default_rng(0))
        assert plan.regions == []

    def test_every_sample_is_a_catalog_member(self):
        catalog = enumerate_regions(8, 8, 2, 2, 1, 0.5)
        plan = sample_mask_plan(catalog, 64, np.random.default_rng(1))
        members = set(catalog.regions)
        assert all(r in members for r in plan.regions)

    def test_same_seed_gives_identical_plans(self):
        catalog = enumerate_regions(8, 8, 2, 2, 1, 0.5)
        a = sample_mask_plan(catalog, 16, np.random.default_rng(9))
        b = sample_mask_plan(catalog, 16, np.random.default_rng(9))
        assert a.regions == b.regions

    def test_empty_catalog_raises(self):
        catalog = enumerate_regions(7, 7, 2, 2, 4, 0.0)
        with pytest.raises(RegionConfigError, match="disable masking"):
            sample_mask_plan(catalog, 4, np.random.default_rng(0))


class TestApplyMask:
    def _fused(self, t=4, h=8, w=8, c=3, seed=0):
        rng = np.random.default_rng(seed)
        return Tensor(rng.normal(size=(t, h, w, c)).astype(np.float32))

    def test_absent_plan_is_passthrough(self):
        catalog = enumerate_regions(8, 8, 2, 2, 1, 0.3)
        fused = self._fused()
        out = apply_mask(fused, None, catalog)
        assert out is fused

    def test_masked_cells_are_exactly_zero_and_rest_untouched(self):
        catalog = enumerate_regions(8, 8, 2, 2, 1, 0.5)
        fused = self._fused()
        plan = sample_mask_plan(catalog, 4, np.random.default_rng(5))
        out = apply_mask(fused, plan, catalog)
        mult = mask_multiplier(plan, catalog, (4, 8, 8))
        masked = mult[..., 0] == 0.0
        assert np.all(out.data[masked] == 0.0)
        assert np.array_equal(out.data[~masked], fused.data[~masked])

    def test_masked_fraction_strictly_below_threshold_over_100_plans(self):
        threshold = 0.5
        catalog = enumerate_regions(8, 8, 2, 2, 1, threshold)
        assert len(catalog) > 0
        ones = Tensor(np.ones((4, 8, 8, 2), dtype=np.float32))
        rng = np.random.default_rng(123)
        for _ in range(100):
            plan = sample_mask_plan(catalog, 4, rng)
            out = apply_mask(ones, plan, catalog)
            for frame in out.data:
                zero_cells = np.sum(frame[..., 0] == 0.0)
                assert zero_cells / (8 * 8) < threshold
                assert zero_cells > 0

    def test_batched_plans(self):
        catalog = enumerate_regions(8, 8, 2, 2, 1, 0.5)
        rng = np.random.default_rng(3)
        batch = Tensor(rng.normal(size=(2, 4, 8, 8, 3)).astype(np.float32))
        plans = [sample_mask_plan(catalog, 4, rng) for _ in range(2)]
        out = apply_mask(batch, plans, catalog)
        assert out.shape == batch.shape


class TestFusePyramid:
    def test_channel_arithmetic(self):
        cfg = toy_config()
        store = ParamStore()
        init_fusion_params(store, cfg, np.random.default_rng(0), np.float32)
        rng = np.random.default_rng(1)
        stages = [
            Tensor(rng.normal(size=(4, 64 // s, 64 // s, c)).astype(np.float32))
            for s, c in zip(cfg.stage_strides, cfg.stage_channels)
        ]
        fused = fuse_pyramid(FeaturePyramid(stages), store, cfg)
        assert fused.shape == (4, 8, 8, cfg.fused_channels)

    def test_constant_stages_identity_projection_stay_constant(self):
        cfg = RunConfig(frames=4, height=32, width=32)
        store = ParamStore()
        for m in range(1, 5):
            store.add(f"encoder.fuse{m}.w", np.eye(1, dtype=np.float32))
            store.add(f"encoder.fuse{m}.b", np.zeros(1, dtype=np.float32))
        stages = [
            Tensor(np.full((2, 32 // s, 32 // s, 1), float(m), dtype=np.float32))
            for m, s in zip(range(1, 5), cfg.stage_strides)
        ]
        fused = fuse_pyramid(FeaturePyramid(stages), store, cfg)
        assert fused.shape == (2, 4, 4, 4)
        for m in range(4):
            assert np.all(fused.data[..., m] == float(m + 1))

    def test_hand_resize_concat_oracle(self):
        cfg = RunConfig(frames=4, height=32, width=32)
        store = ParamStore()
        for m in range(1, 5):
            store.add(f"encoder.fuse{m}.w", np.eye(1, dtype=np.float64))
            store.add(f"encoder.fuse{m}.b", np.zeros(1, dtype=np.float64))
        rng = np.random.default_rng(2)
        raw = [rng.normal(size=(2, 32 // s, 32 // s, 1)) for s in cfg.stage_strides]
        fused = fuse_pyramid(FeaturePyramid([Tensor(r) for r in raw]), store, cfg)

        expected = np.zeros((2, 4, 4, 4))
        # stage 1: 8x8 block-averaged down to 4x4
        expected[..., 0] = raw[0].reshape(2, 4, 2, 4, 2).mean(axis=(2, 4))
        # stage 2: already 4x4
        expected[..., 1] = raw[1][..., 0]
        # stage 3: 2x2 nearest-upsampled to 4x4
        expected[..., 2] = np.repeat(np.repeat(raw[2][..., 0], 2, axis=1), 2, axis=2)
        # stage 4: 1x1 replicated
        expected[..., 3] = np.repeat(np.repeat(raw[3][..., 0], 4, axis=1), 4, axis=2)
        assert np.allclose(fused.data, expected, atol=1e-12)


class TestPoolFinal:
    def test_published_shape(self):
        x = Tensor(np.zeros((16, 28, 28, 3), dtype=np.float32))
        assert pool_final(x).shape == (15, 7, 7, 3)

    def test_constant_input(self):
        x = Tensor(np.full((4, 8, 8, 2), 2.25, dtype=np.float32))
        out = pool_final(x)
        assert np.allclose(out.data, 2.25)

    def test_checkerboard_mean(self):
        board = np.indices((2, 4, 4)).sum(axis=0) % 2
        x = Tensor(board.reshape(2, 4, 4, 1).astype(np.float64))
        out = pool_final(x)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.reshape(()) == 0.5


class TestEndToEndGradient:
    def test_fuse_mask_pool_gradcheck(self):
        cfg = RunConfig(frames=4, height=32, width=32, base_channels=2, fused_channels=8)
        store = ParamStore()
        init_fusion_params(store, cfg, np.random.default_rng(0), np.float64)
        rng = np.random.default_rng(1)
        for m, (s, c) in enumerate(zip(cfg.stage_strides, cfg.stage_channels), start=1):
            store.add(f"stage_input{m}", rng.normal(size=(2, 32 // s, 32 // s, c)))
        catalog = enumerate_regions(4, 4, 1, 1, 1, 0.5)
        plan = sample_mask_plan(catalog, 2, np.random.default_rng(2))
        probe = Tensor(rng.normal(size=(1, 1, 1, 8)))

        def f(s):
            pyramid = FeaturePyramid([s[f"stage_input{m}"] for m in range(1, 5)])
            fused = fuse_pyramid(pyramid, s, cfg)
            masked = apply_mask(fused, plan, catalog)
            return T.sum_all(T.mul(pool_final(masked), probe))

        report = grad_check(f, store, samples_per_param=8)
        assert report.max_rel_error < 1e-3, report.per_param

    def test_toy_catalog_is_nonempty(self):
        assert len(catalog_for(toy_config())) > 0
