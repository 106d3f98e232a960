"""
Frame-pair, weight and flow files, plus the synthetic scene generator.

File formats (all integers and floats little-endian):

    SFFP v1  magic "SFFP", u32 version, u32 section count, then sections of
             8-byte NUL-padded ASCII tag, u64 payload length, payload.
             Required: PT0, PT1 (f32 N x 3), GM0, GM1 (u8), EGO (f64 4 x 4
             row-major), DT (f32). Optional: GF0 (f32 N x 3), CL0 (u8 N).
             Unknown tags are skipped.
    SSFW v1  magic "SSFW", u32 tensor count; per tensor u32 name length,
             UTF-8 name, u32 ndim, u32 dims, f32 data row-major.
    SSFL v1  magic "SSFL", u32 N, f32 N x 3 flow, u8 N processed mask.

The generator draws from numpy's Philox counter-based bit generator seeded
with the 64-bit `rng_seed`, so a seed names the same scene everywhere.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .core import (FlowField, FramePair, GridConfig, PointCloud, RigidTransform,
                   apply_transform, quantize_f32)
from .exceptions import (BadMagicError, ContractViolation, DuplicateTensorError, MissingSectionError,
                         StructureError, TruncatedSectionError, VersionMismatchError)

logger = logging.getLogger(__name__)

BACKGROUND, VEHICLE, PEDESTRIAN = 0, 1, 2
CLASS_NAMES = {BACKGROUND: 'background', VEHICLE: 'vehicle', PEDESTRIAN: 'pedestrian'}

GROUND_Z = -1.8
PEDESTRIAN_SIZE = (0.7, 0.7, 1.75)
PEDESTRIAN_SPEED_RANGE = (0.5, 2.0)
VEHICLE_HEIGHT = 1.6
VEHICLE_WIDTH_RATIO = 0.42
BOX_MARGIN = 0.98

FRAME_MAGIC = b'SFFP'
FRAME_VERSION = 1
WEIGHT_MAGIC = b'SSFW'
FLOW_MAGIC = b'SSFL'
REQUIRED_SECTIONS = ('PT0', 'PT1', 'GM0', 'GM1', 'EGO', 'DT')

_FRAME_HEADER = struct.Struct('<4sII')
_SECTION_HEADER = struct.Struct('<8sQ')
_U32 = struct.Struct('<I')


def make_rng(seed):
    """Counter-based generator for a 64-bit integer seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


# Synthetic scenes

@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Knobs of the rigid-box scene generator.

    box_size_range is the vehicle length range; box_speed_range applies to
    vehicles, pedestrians always walk at 0.5-2 m/s. placement_extent is the
    half-side (metres) of the square objects are placed in; by default the
    scene fills 90% of the grid.
    """

    n_background_points: int = 4000
    n_boxes: int = 6
    box_size_range: Tuple[float, float] = (3.5, 5.0)
    box_speed_range: Tuple[float, float] = (2.0, 15.0)
    ego_speed_range: Tuple[float, float] = (0.0, 10.0)
    grid: GridConfig = field(default_factory=GridConfig)
    dt: float = 0.1
    rng_seed: int = 0
    points_per_box: int = 150
    ground_fraction: float = 0.4
    pedestrian_fraction: float = 0.3
    placement_extent: Optional[float] = None
    ego_yaw_range: float = 0.02
    heading: Optional[float] = None

    def __post_init__(self):
        if min(self.n_background_points, self.n_boxes, self.points_per_box) < 0:
            raise ContractViolation("point and box counts must be >= 0")
        for name in ('box_size_range', 'box_speed_range', 'ego_speed_range'):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ContractViolation(f"{name} must be a non-negative (low, high) pair, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.box_size_range[0] <= 0 and self.n_boxes:
            raise ContractViolation("box sizes must be positive")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ContractViolation(f"dt must be positive, got {self.dt}")
        if not (0.0 <= self.ground_fraction <= 1.0 and 0.0 <= self.pedestrian_fraction <= 1.0):
            raise ContractViolation("fractions must lie in [0, 1]")
        if self.placement_extent is not None and self.placement_extent <= 0:
            raise ContractViolation("placement extent must be positive")

    @property
    def extent(self):
        return self.placement_extent if self.placement_extent is not None else 0.45 * self.grid.range_m


@dataclass(frozen=True, eq=False)
class SyntheticBox:
    class_id: int
    center: np.ndarray
    size: np.ndarray
    heading: float
    velocity: np.ndarray

    @property
    def rotation(self):
        return RigidTransform.from_yaw(self.heading).rotation

    def local_coords(self, points):
        """Box-frame coordinates of world points at time t."""
        return (np.asarray(points) - self.center) @ self.rotation


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """A generated pair plus the generator's own bookkeeping.

    exact_flow is the double precision flow before rounding to single
    precision; box_index is -1 for static rows of cloud_t.
    """

    pair: FramePair
    exact_flow: np.ndarray
    box_index: np.ndarray
    boxes: Tuple[SyntheticBox, ...]


def _sample_boxes(rng, cfg, dt):
    boxes = []
    extent = 0.8 * cfg.extent
    for _ in range(cfg.n_boxes):
        if rng.uniform() < cfg.pedestrian_fraction:
            class_id = PEDESTRIAN
            size = np.array(PEDESTRIAN_SIZE)
            speed = rng.uniform(*PEDESTRIAN_SPEED_RANGE)
        else:
            class_id = VEHICLE
            length = rng.uniform(*cfg.box_size_range)
            size = np.array([length, VEHICLE_WIDTH_RATIO * length, VEHICLE_HEIGHT])
            speed = rng.uniform(*cfg.box_speed_range)
        heading = cfg.heading if cfg.heading is not None else rng.uniform(0.0, 2.0 * math.pi)
        center = np.array([rng.uniform(-extent, extent), rng.uniform(-extent, extent), GROUND_Z + size[2] / 2.0])
        velocity = speed * np.array([math.cos(heading), math.sin(heading), 0.0])
        boxes.append(SyntheticBox(class_id, center, size, float(heading), velocity))
    return tuple(boxes)


def _box_points(rng, box, count, displacement):
    local = rng.uniform(-BOX_MARGIN / 2.0, BOX_MARGIN / 2.0, size=(count, 3)) * box.size
    return box.center + displacement + local @ box.rotation.T


def _static_points(rng, cfg, structures, n_ground, n_structure):
    extent = cfg.extent
    ground = np.column_stack([
        rng.uniform(-extent, extent, n_ground),
        rng.uniform(-extent, extent, n_ground),
        GROUND_Z + rng.uniform(-0.05, 0.05, n_ground),
    ])
    if n_structure:
        which = rng.integers(0, len(structures), n_structure)
        centers = np.array([s[0] for s in structures])[which]
        sizes = np.array([s[1] for s in structures])[which]
        local = rng.uniform(-0.5, 0.5, size=(n_structure, 2)) * sizes
        walls = np.column_stack([centers + local, rng.uniform(GROUND_Z + 0.2, 1.5, n_structure)])
    else:
        walls = np.zeros((0, 3))
    return ground, walls


def synth_scene(cfg):
    """Generate one scene with exact bookkeeping. See synth_frame_pair."""
    rng = make_rng(cfg.rng_seed)
    dt = float(np.float32(cfg.dt))
    n_ground = int(round(cfg.n_background_points * cfg.ground_fraction))
    n_structure = cfg.n_background_points - n_ground

    yaw = rng.uniform(-cfg.ego_yaw_range, cfg.ego_yaw_range) if cfg.ego_yaw_range > 0 else 0.0
    ego_speed = rng.uniform(*cfg.ego_speed_range)
    ego = RigidTransform.from_yaw(yaw, (-ego_speed * dt, 0.0, 0.0))

    structure_count = max(1, n_structure // 100) if n_structure else 0
    structures = [
        (rng.uniform(-cfg.extent, cfg.extent, 2), rng.uniform(0.5, 3.0, 2))
        for _ in range(structure_count)
    ]
    boxes = _sample_boxes(rng, cfg, dt)

    ground_t, walls_t = _static_points(rng, cfg, structures, n_ground, n_structure)
    box_t = [_box_points(rng, box, cfg.points_per_box, 0.0) for box in boxes]
    ground_t1, walls_t1 = _static_points(rng, cfg, structures, n_ground, n_structure)
    box_t1 = [_box_points(rng, box, cfg.points_per_box, box.velocity * dt) for box in boxes]

    positions = np.concatenate([ground_t, walls_t] + box_t) if box_t else np.concatenate([ground_t, walls_t])
    static_count = n_ground + n_structure
    box_index = np.concatenate([np.full(static_count, -1)] + [np.full(cfg.points_per_box, i) for i in range(len(boxes))])
    class_id = np.concatenate([np.zeros(static_count, dtype=np.uint8)] + [
        np.full(cfg.points_per_box, box.class_id, dtype=np.uint8) for box in boxes
    ])
    ground = np.arange(positions.shape[0]) < n_ground

    order = rng.permutation(positions.shape[0])
    positions = quantize_f32(positions[order])
    box_index = box_index[order].astype(np.int64)
    class_id = class_id[order]
    ground = ground[order]

    displacement = np.zeros_like(positions)
    moving = box_index >= 0
    if moving.any():
        velocities = np.array([box.velocity for box in boxes])
        displacement[moving] = velocities[box_index[moving]] * dt
    exact_flow = apply_transform(positions + displacement, ego) - positions

    positions_t1 = np.concatenate([ground_t1, walls_t1] + box_t1) if box_t1 else np.concatenate([ground_t1, walls_t1])
    ground_t1_mask = np.arange(positions_t1.shape[0]) < n_ground
    order_t1 = rng.permutation(positions_t1.shape[0])
    positions_t1 = quantize_f32(apply_transform(positions_t1[order_t1], ego))

    pair = FramePair(
        cloud_t=PointCloud(positions, ground, gt_flow=quantize_f32(exact_flow), class_id=class_id),
        cloud_t1=PointCloud(positions_t1, ground_t1_mask[order_t1]),
        ego_motion=ego,
        dt=dt,
    )
    logger.debug(
        "synthesized scene seed=%d: %d/%d points, %d boxes",
        cfg.rng_seed, pair.cloud_t.point_count, pair.cloud_t1.point_count, len(boxes),
    )
    return SyntheticScene(pair=pair, exact_flow=exact_flow, box_index=box_index, boxes=boxes)


def synth_frame_pair(cfg):
    """Generate a frame pair with exact ground-truth flow.

    Static points get zero scene motion, so their total flow is the ego flow;
    box points additionally move by the box displacement over dt. Positions,
    flow and dt are rounded to single precision so the pair survives an SFFP
    round trip unchanged.
    """
    return synth_scene(cfg).pair


# SFFP frame pairs

def _section(tag, array, dtype):
    return tag, np.ascontiguousarray(array, dtype=dtype).tobytes()


def encode_frame_pair(pair):
    """Serialize a FramePair to SFFP bytes."""
    sections = [
        _section('PT0', pair.cloud_t.positions, '<f4'),
        _section('PT1', pair.cloud_t1.positions, '<f4'),
        _section('GM0', pair.cloud_t.ground_mask, 'u1'),
        _section('GM1', pair.cloud_t1.ground_mask, 'u1'),
        _section('EGO', pair.ego_motion.as_matrix(), '<f8'),
        _section('DT', [pair.dt], '<f4'),
    ]
    if pair.cloud_t.gt_flow is not None:
        sections.append(_section('GF0', pair.cloud_t.gt_flow, '<f4'))
    if pair.cloud_t.class_id is not None:
        sections.append(_section('CL0', pair.cloud_t.class_id, 'u1'))

    chunks = [_FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, len(sections))]
    for tag, payload in sections:
        chunks.append(_SECTION_HEADER.pack(tag.encode('ascii').ljust(8, b'\0'), len(payload)))
        chunks.append(payload)
    return b''.join(chunks)


def _read_sections(data):
    if len(data) < 4 or data[:4] != FRAME_MAGIC:
        raise BadMagicError('header', f"bad magic {bytes(data[:4])!r}, expected {FRAME_MAGIC!r}")
    if len(data) < _FRAME_HEADER.size:
        raise TruncatedSectionError('header', "file ends inside the header")
    _, version, count = _FRAME_HEADER.unpack_from(data, 0)
    if version != FRAME_VERSION:
        raise VersionMismatchError('header', f"version {version}, expected {FRAME_VERSION}")

    sections = {}
    offset = _FRAME_HEADER.size
    for index in range(count):
        if offset + _SECTION_HEADER.size > len(data):
            raise TruncatedSectionError(f'section {index}', "file ends inside a section header")
        raw_tag, length = _SECTION_HEADER.unpack_from(data, offset)
        tag = raw_tag.rstrip(b'\0').decode('ascii', errors='replace')
        offset += _SECTION_HEADER.size
        if offset + length > len(data):
            raise TruncatedSectionError(tag, f"declares {length} bytes, {len(data) - offset} remain")
        if tag in sections:
            raise StructureError(tag, "section appears twice")
        sections[tag] = data[offset:offset + length]
        offset += length
    if offset != len(data):
        raise StructureError('trailer', f"{len(data) - offset} bytes after the last section")
    return sections


def _array(sections, tag, dtype, width=None, count=None):
    payload = sections[tag]
    itemsize = np.dtype(dtype).itemsize * (width or 1)
    if len(payload) % itemsize:
        raise StructureError(tag, f"{len(payload)} bytes is not a whole number of {itemsize}-byte rows")
    values = np.frombuffer(payload, dtype=dtype)
    if width:
        values = values.reshape(-1, width)
    if count is not None and values.shape[0] != count:
        raise StructureError(tag, f"{values.shape[0]} rows, expected {count}")
    return values


def decode_frame_pair(data):
    """Parse SFFP bytes.

    Raises:
        BadMagicError, VersionMismatchError, TruncatedSectionError,
        MissingSectionError, StructureError: each names the offending section
    """
    sections = _read_sections(data)
    for tag in REQUIRED_SECTIONS:
        if tag not in sections:
            raise MissingSectionError(tag, "required section is missing")
    unknown = sorted(set(sections) - set(REQUIRED_SECTIONS) - {'GF0', 'CL0'})
    if unknown:
        logger.info("skipping unknown SFFP sections: %s", ', '.join(unknown))

    pt0 = _array(sections, 'PT0', '<f4', 3).astype(np.float64)
    pt1 = _array(sections, 'PT1', '<f4', 3).astype(np.float64)
    gm0 = _array(sections, 'GM0', 'u1', count=pt0.shape[0]) != 0
    gm1 = _array(sections, 'GM1', 'u1', count=pt1.shape[0]) != 0
    ego = _array(sections, 'EGO', '<f8', count=16).reshape(4, 4)
    dt = _array(sections, 'DT', '<f4', count=1)
    gt = _array(sections, 'GF0', '<f4', 3, count=pt0.shape[0]).astype(np.float64) if 'GF0' in sections else None
    classes = _array(sections, 'CL0', 'u1', count=pt0.shape[0]) if 'CL0' in sections else None

    if not np.array_equal(ego[3], [0.0, 0.0, 0.0, 1.0]):
        raise StructureError('EGO', "last row of the ego transform must be [0, 0, 0, 1]")
    try:
        ego_motion = RigidTransform.from_matrix(ego)
    except ContractViolation as exc:
        raise StructureError('EGO', str(exc)) from exc
    try:
        cloud_t = PointCloud(pt0, gm0, gt_flow=gt, class_id=classes)
    except ContractViolation as exc:
        raise StructureError('PT0', str(exc)) from exc
    try:
        cloud_t1 = PointCloud(pt1, gm1)
    except ContractViolation as exc:
        raise StructureError('PT1', str(exc)) from exc
    try:
        return FramePair(cloud_t, cloud_t1, ego_motion, float(dt[0]))
    except ContractViolation as exc:
        raise StructureError('DT', str(exc)) from exc


def write_frame_pair(pair, path):
    Path(path).write_bytes(encode_frame_pair(pair))


def read_frame_pair(path):
    return decode_frame_pair(Path(path).read_bytes())


# SSFW weights

@dataclass(eq=False)
class WeightBundle:
    """Ordered named tensors: (name, shape, flat float32 values)."""

    entries: List[Tuple[str, Tuple[int, ...], np.ndarray]] = field(default_factory=list)

    def add(self, name, shape, values):
        values = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)
        self.entries.append((str(name), tuple(int(d) for d in shape), values))

    def add_array(self, name, array):
        array = np.asarray(array)
        self.add(name, array.shape, array)

    def validate(self):
        seen = set()
        for name, shape, values in self.entries:
            if name in seen:
                raise DuplicateTensorError(name, "tensor name used twice")
            seen.add(name)
            expected = int(np.prod(shape, dtype=np.int64))
            if values.size != expected:
                raise StructureError(name, f"{values.size} values for shape {list(shape)}")

    def names(self):
        return [name for name, _, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def as_arrays(self):
        self.validate()
        return {name: values.reshape(shape).copy() for name, shape, values in self.entries}

    @classmethod
    def from_arrays(cls, arrays):
        bundle = cls()
        for name, array in arrays.items():
            bundle.add_array(name, array)
        return bundle


def encode_weights(bundle):
    bundle.validate()
    chunks = [WEIGHT_MAGIC, _U32.pack(len(bundle))]
    for name, shape, values in bundle.entries:
        raw = name.encode('utf-8')
        chunks.append(_U32.pack(len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f'<I{len(shape)}I', len(shape), *shape))
        chunks.append(values.astype('<f4').tobytes())
    return b''.join(chunks)


def decode_weights(data):
    """Parse SSFW bytes.

    Raises:
        BadMagicError, TruncatedSectionError, DuplicateTensorError,
        StructureError (bytes left over that no declared shape accounts for)
    """
    if len(data) < 4 or data[:4] != WEIGHT_MAGIC:
        raise BadMagicError('header', f"bad magic {bytes(data[:4])!r}, expected {WEIGHT_MAGIC!r}")

    offset = 4

    def take(size, section):
        nonlocal offset
        if offset + size > len(data):
            raise TruncatedSectionError(section, f"needs {size} bytes, {len(data) - offset} remain")
        chunk = data[offset:offset + size]
        offset += size
        return chunk

    (count,) = _U32.unpack(take(4, 'header'))
    bundle = WeightBundle()
    seen = set()
    for index in range(count):
        (name_len,) = _U32.unpack(take(4, f'tensor {index}'))
        try:
            name = take(name_len, f'tensor {index}').decode('utf-8')
        except UnicodeDecodeError as exc:
            raise StructureError(f'tensor {index}', "name is not valid UTF-8") from exc
        if name in seen:
            raise DuplicateTensorError(name, "tensor name used twice")
        seen.add(name)
        (ndim,) = _U32.unpack(take(4, name))
        shape = struct.unpack(f'<{ndim}I', take(4 * ndim, name))
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(4 * size, name), dtype='<f4')
        bundle.add(name, shape, values)
    if offset != len(data):
        raise StructureError('trailer', f"{len(data) - offset} bytes not covered by the declared tensor shapes")
    return bundle


def write_weights(bundle, path):
    Path(path).write_bytes(encode_weights(bundle))


def read_weights(path):
    return decode_weights(Path(path).read_bytes())


# SSFL flow fields

def encode_flow(flow):
    processed = flow.processed if flow.processed is not None else np.zeros(len(flow), dtype=bool)
    return b''.join([
        FLOW_MAGIC,
        _U32.pack(len(flow)),
        np.ascontiguousarray(flow.flow, dtype='<f4').tobytes(),
        np.ascontiguousarray(processed, dtype='u1').tobytes(),
    ])


def decode_flow(data):
    if len(data) < 4 or data[:4] != FLOW_MAGIC:
        raise BadMagicError('header', f"bad magic {bytes(data[:4])!r}, expected {FLOW_MAGIC!r}")
    if len(data) < 8:
        raise TruncatedSectionError('header', "file ends inside the header")
    (n,) = _U32.unpack_from(data, 4)
    expected = 8 + 13 * n
    if len(data) < expected:
        raise TruncatedSectionError('flow', f"{n} rows need {expected} bytes, file has {len(data)}")
    if len(data) > expected:
        raise StructureError('trailer', f"{len(data) - expected} unexpected trailing bytes")
    flow = np.frombuffer(data, dtype='<f4', count=3 * n, offset=8).reshape(n, 3).astype(np.float64)
    processed = np.frombuffer(data, dtype='u1', count=n, offset=8 + 12 * n) != 0
    try:
        return FlowField(flow, np.ones(n, dtype=bool), processed)
    except ContractViolation as exc:
        raise StructureError('flow', str(exc)) from exc


def write_flow(flow, path):
    Path(path).write_bytes(encode_flow(flow))


def read_flow(path):
    return decode_flow(Path(path).read_bytes())
