"""
Sparse voxel feature maps and packed-coordinate lookup.

Coordinates are integer triples stored as columns (iz, iy, ix). A triple packs
into one int64 key, 21 bits per axis, with iz in the high bits, so ascending
key order is exactly the canonical lexicographic (iz, iy, ix) order used by
every map in the engine.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np

from .exceptions import ContractViolation, StructuralError

COORD_BITS = 21
COORD_LIMIT = 1 << COORD_BITS
_MASK = COORD_LIMIT - 1


def pack_coords(coords):
    """Pack (iz, iy, ix) rows into int64 keys.

    Raises:
        ContractViolation: a coordinate is negative or needs more than 21 bits
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.size and (coords.min() < 0 or coords.max() >= COORD_LIMIT):
        raise ContractViolation(f"coordinates must lie in [0, {COORD_LIMIT})")
    return (coords[:, 0] << (2 * COORD_BITS)) | (coords[:, 1] << COORD_BITS) | coords[:, 2]


def unpack_keys(keys):
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([(keys >> (2 * COORD_BITS)) & _MASK, (keys >> COORD_BITS) & _MASK, keys & _MASK], axis=1)


def in_bounds(coords, spatial_shape):
    """Row mask of coordinates that fall inside a (Z, Y, X) grid."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    upper = np.asarray(spatial_shape, dtype=np.int64)
    return np.all((coords >= 0) & (coords < upper), axis=1)


class CoordIndex:
    """Coordinate -> row hash index over a fixed coordinate list.

    A dict maps each packed key to its row; absent or out-of-range
    coordinates come back as -1.
    """

    def __init__(self, coords):
        keys = pack_coords(coords)
        self._table = dict(zip(keys.tolist(), range(keys.size)))
        if len(self._table) != keys.size:
            raise ContractViolation("coordinate list contains duplicates")

    def __len__(self):
        return len(self._table)

    def lookup(self, coords):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        rows = np.full(coords.shape[0], -1, dtype=np.int64)
        if coords.shape[0] == 0 or not self._table:
            return rows
        valid = np.all((coords >= 0) & (coords < COORD_LIMIT), axis=1)
        keys = pack_coords(coords[valid]).tolist()
        get = self._table.get
        rows[valid] = np.fromiter((get(key, -1) for key in keys), dtype=np.int64, count=len(keys))
        return rows


def canonical_order(coords):
    """Permutation that sorts coordinate rows canonically."""
    return np.argsort(pack_coords(coords), kind='stable')


def is_canonical(coords):
    keys = pack_coords(coords)
    return bool(np.all(keys[1:] > keys[:-1]))


@dataclass(frozen=True, eq=False)
class SparseFeatureMap:
    """Row-aligned (coords, features) pair on a bounded voxel grid.

    Attributes:
        coords: S x 3 int64, columns (iz, iy, ix), canonical order, unique
        features: S x C float array (float32 in the network, float64 in checks)
        spatial_shape: (Z, Y, X) extent of the grid the coords live on
    """

    coords: np.ndarray
    features: np.ndarray
    spatial_shape: Tuple[int, int, int]

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(self.features)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ContractViolation(
                f"feature rows ({features.shape}) must match coordinate rows ({coords.shape[0]})"
            )
        if not is_canonical(coords):
            raise ContractViolation("coordinates must be unique and in canonical (iz, iy, ix) order")
        if not np.all(in_bounds(coords, self.spatial_shape)):
            raise ContractViolation(f"coordinates fall outside grid {tuple(self.spatial_shape)}")
        object.__setattr__(self, 'coords', coords)
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'spatial_shape', tuple(int(v) for v in self.spatial_shape))

    @property
    def row_count(self):
        return self.coords.shape[0]

    @property
    def channel_count(self):
        return self.features.shape[1]

    @cached_property
    def index(self):
        return CoordIndex(self.coords)

    def with_features(self, features):
        """Same coordinate set, new feature matrix."""
        return SparseFeatureMap(self.coords, features, self.spatial_shape)

    def same_coords(self, other):
        return (
            self.spatial_shape == other.spatial_shape
            and self.coords.shape == other.coords.shape
            and np.array_equal(self.coords, other.coords)
        )

    def require_same_coords(self, other, where):
        if not self.same_coords(other):
            raise StructuralError(
                f"{where}: coordinate sets differ ({self.row_count} vs {other.row_count} rows)"
            )

    def to_dense(self):
        """Scatter into a (Z, Y, X, C) array. Test and oracle use only."""
        dense = np.zeros(tuple(self.spatial_shape) + (self.channel_count,), dtype=self.features.dtype)
        dense[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = self.features
        return dense

    @classmethod
    def from_dense(cls, dense, coords):
        """Read the rows of `dense` at `coords` (canonicalised first)."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        coords = coords[canonical_order(coords)]
        return cls(coords, dense[coords[:, 0], coords[:, 1], coords[:, 2]], dense.shape[:3])
