"""
Two-scan feature fusion on a shared voxel set.

Both scans are voxelized onto the same grid and their voxel sets merged into
one canonical union. Each scan is padded with one virtual point per union
voxel it does not occupy, so both encoder outputs have exactly one row per
union voxel; the virtual rows are zeroed after encoding and the two maps are
concatenated channel-wise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import layers
from .exceptions import ContractViolation
from .sparse_tensor import SparseFeatureMap, pack_coords, unpack_keys
from .voxelizer import POINT_FEATURES, VoxelAssignment, pool_voxels, vfe_point_layers, voxel_centers, voxelize

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class JointVoxelization:
    """Union voxel set of two scans plus per-scan occupancy masks.

    The per-scan assignments keep their own kept rows, but point_to_voxel
    indexes union_coords.
    """

    union_coords: np.ndarray
    mask_t: np.ndarray
    mask_t1: np.ndarray
    assignment_t: VoxelAssignment
    assignment_t1: VoxelAssignment

    @property
    def union_count(self):
        return self.union_coords.shape[0]


def _onto_union(assignment, union_keys):
    """Re-index a per-scan assignment onto the union voxel list."""
    scan_keys = pack_coords(assignment.unique_voxels)
    position = np.searchsorted(union_keys, scan_keys)
    occupied = np.zeros(union_keys.size, dtype=bool)
    occupied[position] = True
    view = VoxelAssignment(
        kept_point_rows=assignment.kept_point_rows,
        voxel_coord_per_point=assignment.voxel_coord_per_point,
        unique_voxels=unpack_keys(union_keys),
        point_to_voxel=position[assignment.point_to_voxel],
        spatial_shape=assignment.spatial_shape,
    )
    return view, occupied


def joint_voxelize(points_t, points_t1, grid):
    """Voxelize both (ground-removed, ego-compensated) scans onto one voxel set."""
    own_t = voxelize(points_t, grid)
    own_t1 = voxelize(points_t1, grid)
    union_keys = np.union1d(pack_coords(own_t.unique_voxels), pack_coords(own_t1.unique_voxels))
    assignment_t, mask_t = _onto_union(own_t, union_keys)
    assignment_t1, mask_t1 = _onto_union(own_t1, union_keys)
    logger.debug(
        "joint voxelization: %d union voxels (%d from t, %d from t+1)",
        union_keys.size, own_t.voxel_count, own_t1.voxel_count,
    )
    return JointVoxelization(
        union_coords=unpack_keys(union_keys),
        mask_t=mask_t,
        mask_t1=mask_t1,
        assignment_t=assignment_t,
        assignment_t1=assignment_t1,
    )


def virtual_point_features(coords, grid):
    """One virtual point per voxel: centre position, zero offset, centre as cluster mean."""
    centers = voxel_centers(coords, grid)
    return np.concatenate([centers, np.zeros_like(centers), centers], axis=1)


def encode_scan(tape, jv, assignment, mask, feats, params, grid, training, pooling='max'):
    """Encode one scan onto the union voxel set.

    Returns:
        (voxel node with U rows and virtual rows zeroed,
         per-point node for the scan's real kept points)
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape != (assignment.kept_count, POINT_FEATURES):
        raise ContractViolation(f"expected {assignment.kept_count} x {POINT_FEATURES} features, got {feats.shape}")
    virtual_voxels = np.flatnonzero(~mask)
    rows = np.concatenate([feats, virtual_point_features(jv.union_coords[virtual_voxels], grid)])
    segments = np.concatenate([assignment.point_to_voxel, virtual_voxels])
    real = np.zeros(rows.shape[0], dtype=bool)
    real[:assignment.kept_count] = True

    points = vfe_point_layers(tape, rows, params, training, row_mask=real)
    pooled = pool_voxels(tape, points, segments, jv.union_count, pooling)
    voxels = layers.mask_rows(tape, pooled, mask, name='vfe.virtual_mask')
    point_feats = layers.gather_rows(tape, points, np.arange(assignment.kept_count), name='vfe.points')
    return voxels, point_feats


def vfe_with_virtual(jv, feats_t, feats_t1, params, grid, mode='eval', pooling='max'):
    """Encode both scans onto the union voxel set.

    Returns:
        (scan t map, scan t+1 map), one row per union voxel each, rows of
        voxels a scan does not occupy exactly zero
    """
    if mode not in ('train', 'eval'):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    tape = layers.NullTape()
    training = mode == 'train'
    maps = []
    for assignment, mask, feats in ((jv.assignment_t, jv.mask_t, feats_t), (jv.assignment_t1, jv.mask_t1, feats_t1)):
        voxels, _ = encode_scan(tape, jv, assignment, mask, feats, params, grid, training, pooling)
        maps.append(SparseFeatureMap(jv.union_coords, voxels.value, grid.spatial_shape))
    return maps[0], maps[1]


def concat_fused(e_t, e_t1):
    """Channel-wise concatenation [scan t | scan t+1] on a shared coordinate list.

    Raises:
        ContractViolation: row counts, channel counts or coordinates differ
    """
    if e_t.row_count != e_t1.row_count:
        raise ContractViolation(f"fused maps differ in size: {e_t.row_count} vs {e_t1.row_count} rows")
    if e_t.channel_count != e_t1.channel_count:
        raise ContractViolation(f"fused maps differ in width: {e_t.channel_count} vs {e_t1.channel_count}")
    e_t.require_same_coords(e_t1, 'concat_fused')
    return e_t.with_features(np.concatenate([e_t.features, e_t1.features], axis=1))
