"""
Scaling benchmark: the same synthetic scene pushed through grids of growing
range (or shrinking voxel size), recording the logical work counters next to
wall time and the size a dense BEV grid would have.
"""
from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import spconv
from .core import GridConfig
from .exceptions import ContractViolation
from .network import init_params, ssf_forward
from .scene_io import SyntheticSceneConfig, synth_frame_pair

logger = logging.getLogger(__name__)

BENCH_COLUMNS = (
    'range_m', 'voxel_size', 'points', 'union_voxels', 'peak_feature_rows',
    'rulebook_pairs', 'macs', 'dense_grid_cells', 'wall_ms',
)
DEFAULT_RANGES = (51.2, 102.4, 204.8, 409.6)
BOXES = 6
POINTS_PER_BOX = 150
# Objects are kept inside the smallest grid's crop so every range sees them all.
EXTENT_FRACTION = 0.45


@dataclass(frozen=True)
class BenchRow:
    range_m: float
    voxel_size: float
    points: int
    union_voxels: int
    peak_feature_rows: int
    rulebook_pairs: int
    macs: int
    dense_grid_cells: int
    wall_ms: float

    def as_row(self):
        return [getattr(self, name) for name in BENCH_COLUMNS]


def bench_scene_config(point_count, extent, seed):
    if point_count < BOXES * POINTS_PER_BOX:
        raise ContractViolation(f"bench needs at least {BOXES * POINTS_PER_BOX} points, got {point_count}")
    return SyntheticSceneConfig(
        n_background_points=point_count - BOXES * POINTS_PER_BOX,
        n_boxes=BOXES,
        points_per_box=POINTS_PER_BOX,
        placement_extent=extent,
        rng_seed=seed,
    )


def measure(scene_cfg, grid, network, seed, reps):
    """Run `reps` forward passes of one scene on `grid`."""
    if reps < 1:
        raise ContractViolation(f"reps must be >= 1, got {reps}")
    pair = synth_frame_pair(replace(scene_cfg, grid=grid))
    params = init_params(network, seed, grid)
    timings = []
    snapshot = None
    for _ in range(reps):
        spconv.counters.reset()
        started = time.perf_counter()
        ssf_forward(pair, params, grid)
        timings.append((time.perf_counter() - started) * 1000.0)
        snapshot = spconv.counters.snapshot()
    row = BenchRow(
        range_m=grid.range_m,
        voxel_size=grid.voxel_size[0],
        points=pair.cloud_t.point_count,
        union_voxels=snapshot['union_rows'],
        peak_feature_rows=snapshot['peak_feature_rows'],
        rulebook_pairs=snapshot['rulebook_pairs'],
        macs=snapshot['macs'],
        dense_grid_cells=grid.dense_cell_count,
        wall_ms=round(statistics.median(timings), 3),
    )
    logger.info(
        "R=%.1f v=%.3f: %d union voxels, peak rows %d, %d pairs, %.1f ms",
        row.range_m, row.voxel_size, row.union_voxels, row.peak_feature_rows, row.rulebook_pairs, row.wall_ms,
    )
    return row


def range_sweep(ranges, point_count, network, seed=0, reps=3, voxel_size=(0.1, 0.1, 6.0)):
    """Fixed scene and voxel size, growing grid range."""
    ranges = sorted(float(r) for r in ranges)
    if not ranges:
        raise ContractViolation("at least one range is needed")
    scene_cfg = bench_scene_config(point_count, EXTENT_FRACTION * ranges[0], seed)
    return [measure(scene_cfg, GridConfig(range_m=r, voxel_size=voxel_size), network, seed, reps) for r in ranges]


def voxel_sweep(voxel_sizes, point_count, network, seed=0, reps=3, range_m=102.4, z_size=6.0):
    """Fixed scene and range, shrinking horizontal voxel size."""
    if not voxel_sizes:
        raise ContractViolation("at least one voxel size is needed")
    scene_cfg = bench_scene_config(point_count, EXTENT_FRACTION * range_m, seed)
    grids = [GridConfig(range_m=range_m, voxel_size=(float(v), float(v), z_size)) for v in voxel_sizes]
    return [measure(scene_cfg, grid, network, seed, reps) for grid in grids]


def write_bench_csv(rows, path):
    with Path(path).open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(BENCH_COLUMNS)
        for row in rows:
            writer.writerow(row.as_row())


def relative_spread(values):
    """(max - min) / min; 0 for a constant series."""
    values = [float(v) for v in values]
    low = min(values)
    return 0.0 if low == 0 else (max(values) - low) / low
