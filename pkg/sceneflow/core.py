"""
Domain types and rigid-motion geometry shared by every stage of the pipeline.

All geometry is carried in double precision. Arrays handed to the types below
are copied and frozen (read-only), so instances can be shared freely.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .exceptions import ContractViolation

ORTHONORMAL_TOLERANCE = 1e-9


def _frozen(array, dtype, shape_tail=None, name='array'):
    """Copy `array` to `dtype` and mark it read-only."""
    out = np.array(array, dtype=dtype, copy=True)
    if shape_tail is not None and (out.ndim != 1 + len(shape_tail) or out.shape[1:] != shape_tail):
        raise ContractViolation(f"{name} must have shape (N, {', '.join(map(str, shape_tail))}), got {out.shape}")
    out.setflags(write=False)
    return out


# Absolute rounding error quantize_f32 may leave on flow vectors shorter than 16 m.
F32_FLOW_TOLERANCE = 1e-6


def quantize_f32(values):
    """Round values to single precision but keep them in a float64 array.

    Flow and point payloads are exchanged at single precision; values that are
    already on the float32 grid survive a file round trip bit-exactly.
    """
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """One LiDAR scan in the sensor frame."""

    positions: np.ndarray
    ground_mask: np.ndarray
    gt_flow: Optional[np.ndarray] = None
    class_id: Optional[np.ndarray] = None

    def __post_init__(self):
        positions = _frozen(self.positions, np.float64, (3,), 'positions')
        n = positions.shape[0]
        if not np.all(np.isfinite(positions)):
            raise ContractViolation("positions must be finite")
        ground = _frozen(self.ground_mask, bool, name='ground_mask')
        if ground.shape != (n,):
            raise ContractViolation(f"ground_mask must have length {n}, got {ground.shape}")
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'ground_mask', ground)

        if self.gt_flow is not None:
            gt = _frozen(self.gt_flow, np.float64, (3,), 'gt_flow')
            if gt.shape[0] != n:
                raise ContractViolation(f"gt_flow must have {n} rows, got {gt.shape[0]}")
            if not np.all(np.isfinite(gt)):
                raise ContractViolation("gt_flow must be finite")
            object.__setattr__(self, 'gt_flow', gt)
        if self.class_id is not None:
            classes = _frozen(self.class_id, np.uint8, name='class_id')
            if classes.shape != (n,):
                raise ContractViolation(f"class_id must have length {n}, got {classes.shape}")
            object.__setattr__(self, 'class_id', classes)

    @property
    def point_count(self):
        return self.positions.shape[0]

    def subset(self, rows):
        """Return the cloud restricted to `rows`, optional fields included."""
        rows = np.asarray(rows, dtype=np.int64)
        return PointCloud(
            positions=self.positions[rows],
            ground_mask=self.ground_mask[rows],
            gt_flow=None if self.gt_flow is None else self.gt_flow[rows],
            class_id=None if self.class_id is None else self.class_id[rows],
        )

    @classmethod
    def empty(cls):
        return cls(positions=np.zeros((0, 3)), ground_mask=np.zeros(0, dtype=bool))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation, applied as p' = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = _frozen(self.rotation, np.float64, name='rotation')
        translation = _frozen(self.translation, np.float64, name='translation')
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ContractViolation("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ContractViolation("transform must be finite")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOLERANCE:
            raise ContractViolation("rotation columns are not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ContractViolation("rotation determinant must be +1")
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        c, s = math.cos(yaw), math.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rotation, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise ContractViolation(f"expected a 4x4 matrix, got {matrix.shape}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self):
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def inverse(self):
        rotation_t = self.rotation.T
        return RigidTransform(rotation_t, -(rotation_t @ self.translation))

    def compose(self, other):
        """Return the transform that applies `other` first, then `self`."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class GridConfig:
    """Ego-centred pillar grid: R x R metres, voxel size (v_x, v_y, v_z)."""

    range_m: float = 102.4
    voxel_size: Tuple[float, float, float] = (0.1, 0.1, 6.0)
    z_min: float = -3.0
    z_max: float = 3.0

    def __post_init__(self):
        if len(self.voxel_size) != 3:
            raise ContractViolation(f"voxel size needs three components, got {self.voxel_size}")
        vx, vy, vz = (float(v) for v in self.voxel_size)
        object.__setattr__(self, 'voxel_size', (vx, vy, vz))
        object.__setattr__(self, 'range_m', float(self.range_m))
        object.__setattr__(self, 'z_min', float(self.z_min))
        object.__setattr__(self, 'z_max', float(self.z_max))
        if vx <= 0 or vz <= 0 or vx != vy:
            raise ContractViolation(f"voxel size must satisfy v_x = v_y > 0 and v_z > 0, got {self.voxel_size}")
        if self.range_m <= 0:
            raise ContractViolation(f"range must be positive, got {self.range_m}")
        ratio = self.range_m / vx
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ContractViolation(f"range {self.range_m} is not an integral number of {vx} m cells")
        if self.z_max <= self.z_min:
            raise ContractViolation(f"z_max must exceed z_min, got [{self.z_min}, {self.z_max})")
        if self.z_cells < 1:
            raise ContractViolation("z extent must hold at least one voxel")

    @property
    def side_cells(self):
        return int(round(self.range_m / self.voxel_size[0]))

    @property
    def z_cells(self):
        return int(round((self.z_max - self.z_min) / self.voxel_size[2]))

    @property
    def spatial_shape(self):
        """Grid extent in (z, y, x) cell order."""
        d = self.side_cells
        return (self.z_cells, d, d)

    @property
    def dense_cell_count(self):
        z, y, x = self.spatial_shape
        return z * y * x

    @property
    def is_pillar(self):
        return self.z_cells == 1

    def kernel_shape(self, kernel_size):
        """Kernel extent per axis; a pillar grid never convolves along z."""
        k = int(kernel_size)
        return (1, k, k) if self.is_pillar else (k, k, k)

    def stride_shape(self, stride):
        s = int(stride)
        return (1, s, s) if self.is_pillar else (s, s, s)


@dataclass(frozen=True, eq=False)
class FramePair:
    """Two consecutive scans plus the ego motion from scan t to scan t+1."""

    cloud_t: PointCloud
    cloud_t1: PointCloud
    ego_motion: RigidTransform
    dt: float

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ContractViolation(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-point flow aligned to cloud_t rows.

    `processed` marks rows whose flow came out of the network; rows that were
    cropped or ground-removed carry ego-motion flow only.
    """

    flow: np.ndarray
    validity: np.ndarray
    processed: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        flow = _frozen(self.flow, np.float64, (3,), 'flow')
        validity = _frozen(self.validity, bool, name='validity')
        if validity.shape != (flow.shape[0],):
            raise ContractViolation("validity must have one entry per flow row")
        if not np.all(np.isfinite(flow[validity])):
            raise ContractViolation("flow must be finite where valid")
        object.__setattr__(self, 'flow', flow)
        object.__setattr__(self, 'validity', validity)
        if self.processed is not None:
            processed = _frozen(self.processed, bool, name='processed')
            if processed.shape != validity.shape:
                raise ContractViolation("processed must have one entry per flow row")
            object.__setattr__(self, 'processed', processed)

    def __len__(self):
        return self.flow.shape[0]

    @classmethod
    def dense(cls, flow, processed=None):
        flow = np.asarray(flow, dtype=np.float64)
        return cls(flow, np.ones(flow.shape[0], dtype=bool), processed)


def apply_transform(points, transform):
    """Apply T to every row: p' = R p + t."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points @ transform.rotation.T + transform.translation


def ego_flow(points, transform):
    """Flow induced on static points by the ego motion alone."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return apply_transform(points, transform) - points


def compose_flow(ego, residual):
    """Total flow = ego flow + residual flow.

    Rows the residual does not cover (validity false) keep the ego value and
    stay valid; the residual validity is carried over as `processed`.
    """
    if len(ego) != len(residual):
        raise ContractViolation(f"flow length mismatch: ego {len(ego)} vs residual {len(residual)}")
    covered = residual.validity
    flow = ego.flow + np.where(covered[:, None], residual.flow, 0.0)
    return FlowField(flow, ego.validity.copy(), processed=covered & ego.validity)


def remove_ground(cloud):
    """Drop ground points, keeping input order.

    Returns:
        (non-ground PointCloud, index map from subset rows to original rows)
    """
    index_map = np.flatnonzero(~cloud.ground_mask)
    return cloud.subset(index_map), index_map
