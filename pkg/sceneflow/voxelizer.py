"""
Pillar voxelization, 9-dim point augmentation and the voxel feature encoder.

The encoder lifts every kept point to C channels with two
affine -> batch norm -> ReLU layers and pools the points of each voxel into
one row (max by default, mean optional). Output rows follow the canonical
(iz, iy, ix) voxel order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import layers
from .exceptions import ContractViolation
from .sparse_tensor import SparseFeatureMap, pack_coords, unpack_keys

logger = logging.getLogger(__name__)

POINT_FEATURES = 9
VFE_LAYERS = 2
POOLING_MODES = ('max', 'mean')


@dataclass(frozen=True, eq=False)
class VoxelAssignment:
    """Where every kept point of one scan landed on the grid.

    kept_point_rows is in canonical order: by voxel, then by (x, y, z), so the
    assignment of a permuted cloud lists the same points in the same order.
    All coordinate arrays use (iz, iy, ix) columns; spatial_shape is the
    (D_z, D, D) extent of the grid they were taken on.
    """

    kept_point_rows: np.ndarray
    voxel_coord_per_point: np.ndarray
    unique_voxels: np.ndarray
    point_to_voxel: np.ndarray
    spatial_shape: Tuple[int, int, int]

    @property
    def kept_count(self):
        return self.kept_point_rows.shape[0]

    @property
    def voxel_count(self):
        return self.unique_voxels.shape[0]


def voxel_indices(points, grid):
    """Integer cell of each point plus the in-grid mask (half-open bounds)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    half = grid.range_m / 2.0
    vx, vy, vz = grid.voxel_size
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    kept = (x >= -half) & (x < half) & (y >= -half) & (y < half) & (z >= grid.z_min) & (z < grid.z_max)
    d = grid.side_cells
    ix = np.clip(np.floor((x + half) / vx).astype(np.int64), 0, d - 1)
    iy = np.clip(np.floor((y + half) / vy).astype(np.int64), 0, d - 1)
    iz = np.clip(np.floor((z - grid.z_min) / vz).astype(np.int64), 0, grid.z_cells - 1)
    return np.stack([iz, iy, ix], axis=1), kept


def voxel_centers(coords, grid):
    """Metric (x, y, z) centre of each (iz, iy, ix) cell."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    half = grid.range_m / 2.0
    vx, vy, vz = grid.voxel_size
    return np.stack([
        -half + (coords[:, 2] + 0.5) * vx,
        -half + (coords[:, 1] + 0.5) * vy,
        grid.z_min + (coords[:, 0] + 0.5) * vz,
    ], axis=1)


def voxelize(points, grid):
    """Rasterize points onto the grid.

    Args:
        points: N x 3 array
        grid: GridConfig

    Returns:
        VoxelAssignment with voxels sorted lexicographically by (iz, iy, ix)
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cells, kept = voxel_indices(points, grid)
    rows = np.flatnonzero(kept)
    keys = pack_coords(cells[rows])
    kept_pts = points[rows]
    order = np.lexsort((kept_pts[:, 2], kept_pts[:, 1], kept_pts[:, 0], keys))
    rows = rows[order]
    keys = keys[order]
    unique_keys, point_to_voxel = np.unique(keys, return_inverse=True)
    logger.debug("voxelized %d of %d points into %d voxels", rows.size, points.shape[0], unique_keys.size)
    return VoxelAssignment(
        kept_point_rows=rows.astype(np.int64),
        voxel_coord_per_point=cells[rows],
        unique_voxels=unpack_keys(unique_keys),
        point_to_voxel=point_to_voxel.reshape(-1).astype(np.int64),
        spatial_shape=tuple(grid.spatial_shape),
    )


def augment_point_features(points, assignment, grid):
    """Per kept point: [x, y, z, offset from voxel centre, voxel cluster mean].

    The cluster mean only averages kept points, so it is computed after
    cropping.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    kept = points[assignment.kept_point_rows]
    offsets = kept - voxel_centers(assignment.voxel_coord_per_point, grid)

    voxel_total = int(assignment.point_to_voxel.max()) + 1 if assignment.kept_count else 0
    counts = np.bincount(assignment.point_to_voxel, minlength=voxel_total)
    sums = np.stack([
        np.bincount(assignment.point_to_voxel, weights=kept[:, axis], minlength=voxel_total)
        for axis in range(3)
    ], axis=1) if assignment.kept_count else np.zeros((0, 3))
    means = sums / np.maximum(counts, 1)[:, None]
    cluster = means[assignment.point_to_voxel]
    return np.concatenate([kept, offsets, cluster], axis=1)


@dataclass(frozen=True, eq=False)
class VfeParams:
    """Typed view of the `vfe.*` tensors of a parameter dict."""

    tensors: Dict[str, np.ndarray]
    norm: bool = True

    def __post_init__(self):
        width = POINT_FEATURES
        for layer in range(VFE_LAYERS):
            w = self.weight(layer)
            if w.ndim != 2 or w.shape[0] != width:
                raise ContractViolation(f"vfe.{layer}.w has shape {w.shape}, expected ({width}, *)")
            width = w.shape[1]

    def weight(self, layer):
        return self.tensors[f'vfe.{layer}.w']

    def bias(self, layer):
        return self.tensors[f'vfe.{layer}.b']

    def norm_tensor(self, layer, which):
        return self.tensors[f'vfe.{layer}.norm.{which}']

    @property
    def hidden_width(self):
        return self.weight(0).shape[1]

    @property
    def out_width(self):
        return self.weight(VFE_LAYERS - 1).shape[1]

    @property
    def dtype(self):
        return self.weight(0).dtype


def vfe_point_layers(tape, feats, params, training, row_mask=None):
    """The shared per-point MLP; returns a node of (rows x C) features."""
    x = tape.constant(np.asarray(feats).astype(params.dtype, copy=False), 'vfe.input')
    for layer in range(VFE_LAYERS):
        prefix = f'vfe.{layer}'
        x = layers.linear(
            tape, x, tape.param(f'{prefix}.w', params.weight(layer)),
            tape.param(f'{prefix}.b', params.bias(layer)), name=prefix,
        )
        if params.norm:
            x = layers.batch_norm(
                tape, x,
                tape.param(f'{prefix}.norm.gamma', params.norm_tensor(layer, 'gamma')),
                tape.param(f'{prefix}.norm.beta', params.norm_tensor(layer, 'beta')),
                params.norm_tensor(layer, 'running_mean'),
                params.norm_tensor(layer, 'running_var'),
                training, row_mask=row_mask, name=f'{prefix}.norm',
            )
        x = layers.relu(tape, x, name=f'{prefix}.relu')
        layers.check_finite(x, prefix)
    return x


def pool_voxels(tape, point_feats, point_to_voxel, voxel_count, pooling='max'):
    if pooling == 'max':
        return layers.segment_max(tape, point_feats, point_to_voxel, voxel_count, name='vfe.pool')
    if pooling == 'mean':
        return layers.segment_mean(tape, point_feats, point_to_voxel, voxel_count, name='vfe.pool')
    raise ContractViolation(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")


def vfe_forward(feats, assignment, params, mode='eval', pooling='max'):
    """Encode one scan into a sparse voxel feature map.

    The result lives on the grid the assignment was taken on.

    Args:
        feats: kept_N x 9 augmented features, rows aligned with assignment
        assignment: VoxelAssignment of the same scan
        params: VfeParams
        mode: 'train' (batch statistics) or 'eval' (running statistics)

    Raises:
        NumericError: an encoder layer produced non-finite values
    """
    if mode not in ('train', 'eval'):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    feats = np.asarray(feats)
    if feats.shape != (assignment.kept_count, POINT_FEATURES):
        raise ContractViolation(f"expected {assignment.kept_count} x {POINT_FEATURES} features, got {feats.shape}")
    tape = layers.NullTape()
    points = vfe_point_layers(tape, feats, params, training=(mode == 'train'))
    pooled = pool_voxels(tape, points, assignment.point_to_voxel, assignment.voxel_count, pooling)
    return SparseFeatureMap(assignment.unique_voxels, pooled.value, assignment.spatial_shape)
