"""Fuse the feature pyramid, mask one rectangular region per frame, pool.

The region catalog enumerates every anchored rectangle on the fused
feature grid whose area stays under a configurable fraction of the
canvas. During training one region per frame is zeroed out; inference
never masks. A final 3-d average pool produces the video representation.

Grid, areas and the area threshold are all measured on the fused feature
map (height/8 x width/8 cells). The published region count for the
4-cell grid at 224x224 is not reproducible under any single consistent
canvas reading; this interpretation is the self-consistent one and the
parameters stay configurable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeaturePyramid
from .config import RunConfig
from .tensor import ParamStore, Tensor, concat_last, init_uniform, linear, mul, avg_pool3d, resize_spatial


class RegionConfigError(ValueError):
    """Masking requested but the region catalog cannot support it."""


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle on the grid: anchor (row, col) in grid points,
    extent (height_units * dy, width_units * dx) in grid cells."""

    row: int
    col: int
    height_units: int
    width_units: int


@dataclass(frozen=True)
class RegionCatalog:
    regions: tuple[Region, ...]
    grid_rows: int
    grid_cols: int
    dx: int
    dy: int
    cell: int               # feature cells per grid cell side
    area_threshold: float

    def __len__(self) -> int:
        return len(self.regions)

    def cell_area(self, region: Region) -> int:
        """Region area in feature cells."""
        return (region.height_units * self.dy * self.cell) * (
            region.width_units * self.dx * self.cell
        )

    def cell_bounds(self, region: Region) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1) half-open bounds in feature cells."""
        r0 = region.row * self.cell
        c0 = region.col * self.cell
        return (
            r0,
            r0 + region.height_units * self.dy * self.cell,
            c0,
            c0 + region.width_units * self.dx * self.cell,
        )


@dataclass
class MaskPlan:
    """One catalog region per frame, plus the seed that produced the draw."""

    regions: list[Region]
    seed: int | None = None


def enumerate_regions(
    grid_rows: int, grid_cols: int, dx: int, dy: int, cell: int, threshold: float
) -> RegionCatalog:
    """Exhaustive catalog of rectangles r(i, j, w*dx, h*dy).

    Membership requires i, j >= 1, strict containment i + h*dy < grid_rows
    and j + w*dx < grid_cols, and area strictly below threshold * canvas
    area. Ordering is (i, j, h, w) lexicographic. Empty catalogs are legal.
    """
    if grid_rows < 2 or grid_cols < 2 or dx < 1 or dy < 1 or cell < 1:
        raise ValueError(
            f"invalid region grid: {grid_rows}x{grid_cols}, dx={dx}, dy={dy}, cell={cell}"
        )
    canvas_area = (grid_rows * cell) * (grid_cols * cell)
    regions: list[Region] = []
    for i in range(1, grid_rows):
        for j in range(1, grid_cols):
            h = 1
            while i + h * dy < grid_rows:
                w = 1
                while j + w * dx < grid_cols:
                    area = (h * dy * cell) * (w * dx * cell)
                    if area < threshold * canvas_area:
                        regions.append(Region(i, j, h, w))
                    w += 1
                h += 1
    return RegionCatalog(
        regions=tuple(regions),
        grid_rows=grid_rows,
        grid_cols=grid_cols,
        dx=dx,
        dy=dy,
        cell=cell,
        area_threshold=threshold,
    )


def catalog_for(cfg: RunConfig) -> RegionCatalog:
    """Catalog on the fused map of a configuration; input-independent."""
    fused_h = cfg.height // 8
    fused_w = cfg.width // 8
    return enumerate_regions(
        grid_rows=fused_h // cfg.grid_cell,
        grid_cols=fused_w // cfg.grid_cell,
        dx=cfg.min_region_width,
        dy=cfg.min_region_height,
        cell=cfg.grid_cell,
        threshold=cfg.mask_area_threshold,
    )


def sample_mask_plan(
    catalog: RegionCatalog, t_frames: int, rng: np.random.Generator, seed: int | None = None
) -> MaskPlan:
    """Uniform independent region draw per frame; reproducible from the rng."""
    if t_frames == 0:
        return MaskPlan(regions=[], seed=seed)
    if len(catalog) == 0:
        raise RegionConfigError(
            "cannot sample a mask plan from an empty region catalog; disable masking instead"
        )
    picks = rng.integers(0, len(catalog), size=t_frames)
    return MaskPlan(regions=[catalog.regions[int(k)] for k in picks], seed=seed)


def mask_multiplier(
    plan: MaskPlan, catalog: RegionCatalog, fused_shape: tuple[int, int, int]
) -> np.ndarray:
    """0/1 multiplier [t, h, w, 1] zeroing each frame's chosen region."""
    t, h, w = fused_shape
    if len(plan.regions) != t:
        raise ValueError(f"plan covers {len(plan.regions)} frames, fused map has {t}")
    mult = np.ones((t, h, w, 1), dtype=np.float32)
    for frame, region in enumerate(plan.regions):
        r0, r1, c0, c1 = catalog.cell_bounds(region)
        if r1 > h or c1 > w:
            raise ValueError(f"region {region} exceeds fused map {h}x{w}")
        mult[frame, r0:r1, c0:c1, 0] = 0.0
    return mult


def init_fusion_params(store: ParamStore, cfg: RunConfig, rng: np.random.Generator, dtype) -> None:
    per_stage = cfg.fused_channels // cfg.stages
    for m, width in enumerate(cfg.stage_channels, start=1):
        store.add(f"encoder.fuse{m}.w", init_uniform(rng, (width, per_stage), width, dtype))
        store.add(f"encoder.fuse{m}.b", np.zeros(per_stage, dtype=dtype))


def fuse_pyramid(pyramid: FeaturePyramid, params: ParamStore, cfg: RunConfig) -> Tensor:
    """Project each stage to C/M channels, resize to the height/8 grid,
    concatenate in stage order: [..., T/2, H/8, W/8, C]."""
    target = (cfg.height // 8, cfg.width // 8)
    fused = []
    for m, stage in enumerate(pyramid.stages, start=1):
        projected = linear(stage, params[f"encoder.fuse{m}.w"], params[f"encoder.fuse{m}.b"])
        fused.append(resize_spatial(projected, target))
    return concat_last(fused)


def apply_mask(
    fused: Tensor,
    plans: list[MaskPlan] | MaskPlan | None,
    catalog: RegionCatalog,
) -> Tensor:
    """Zero the planned region of every frame; absent plan passes through.

    The multiplier is a constant, so masked cells receive zero gradient
    and all other cells are untouched bit for bit.
    """
    if plans is None:
        return fused
    t, h, w = fused.shape[-4], fused.shape[-3], fused.shape[-2]
    if isinstance(plans, MaskPlan):
        mult = mask_multiplier(plans, catalog, (t, h, w))
    else:
        if fused.ndim != 5 or len(plans) != fused.shape[0]:
            raise ValueError(
                f"need one plan per batch element: {len(plans)} plans for shape {fused.shape}"
            )
        mult = np.stack([mask_multiplier(p, catalog, (t, h, w)) for p in plans])
    return mul(fused, Tensor(mult.astype(fused.dtype)))


def pool_final(fused: Tensor) -> Tensor:
    """Average-pool with kernel (2, 4, 4), stride (1, 4, 4): the unique
    standard pair mapping T/2 x H/8 x W/8 onto (T/2 - 1) x H/32 x W/32."""
    return avg_pool3d(fused, kernel=(2, 4, 4), stride=(1, 4, 4))
