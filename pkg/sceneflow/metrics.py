"""
End-point-error metrics.

Every metric works on an EvalFrame, whose flows are motion-compensated (ego
flow removed), so speeds measure how fast things move in the world rather
than relative to the sensor. EPE itself is unchanged by the compensation
because the same ego flow is removed from both prediction and GT.

Cells with no points are reported as absent (None) and are left out of every
mean; they are never zero-filled.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import ego_flow, quantize_f32
from .exceptions import ContractViolation, EmptyBinError

logger = logging.getLogger(__name__)

RANGEWISE_THRESHOLD_MPS = 1.4
THREEWAY_THRESHOLD_MPS = 0.5
BUCKET_WIDTH_MPS = 0.4
BUCKET_CAP_MPS = 20.0
DEFAULT_BIN_EDGES = (35.0, 50.0, 75.0, 100.0)
# Relative slack on strict speed thresholds, so a speed that is exactly the
# threshold in decimal (0.14 m over 0.1 s) still reads as not above it.
SPEED_TOLERANCE = 1e-9

DYNAMIC, STATIC = 'dynamic', 'static'


@dataclass(frozen=True, eq=False)
class EvalFrame:
    """One scan's prediction and GT with the per-point attributes metrics need."""

    pred_flow: np.ndarray
    gt_flow: np.ndarray
    range_m: np.ndarray
    is_foreground: np.ndarray
    class_id: np.ndarray
    dt: float

    def __post_init__(self):
        pred = np.asarray(self.pred_flow, dtype=np.float64).reshape(-1, 3)
        gt = np.asarray(self.gt_flow, dtype=np.float64).reshape(-1, 3)
        n = pred.shape[0]
        ranges = np.asarray(self.range_m, dtype=np.float64).reshape(-1)
        fg = np.asarray(self.is_foreground, dtype=bool).reshape(-1)
        classes = np.asarray(self.class_id).astype(np.int64).reshape(-1)
        if not (gt.shape[0] == ranges.shape[0] == fg.shape[0] == classes.shape[0] == n):
            raise ContractViolation("EvalFrame arrays must share one length")
        if np.any(ranges < 0):
            raise ContractViolation("range_m must be >= 0")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ContractViolation(f"dt must be positive, got {self.dt}")
        for name, value in (('pred_flow', pred), ('gt_flow', gt), ('range_m', ranges),
                            ('is_foreground', fg), ('class_id', classes)):
            object.__setattr__(self, name, value)

    def __len__(self):
        return self.pred_flow.shape[0]

    @property
    def errors(self):
        return np.sqrt(((self.pred_flow - self.gt_flow) ** 2).sum(axis=1))

    @property
    def speed(self):
        return np.sqrt((self.gt_flow ** 2).sum(axis=1)) / self.dt

    @classmethod
    def from_pair(cls, pair, pred):
        """Build a frame from a FramePair with GT and a predicted FlowField.

        Both flows are compensated with the single-precision ego flow.
        """
        cloud = pair.cloud_t
        if cloud.gt_flow is None:
            raise ContractViolation("frame pair carries no ground-truth flow")
        if len(pred) != cloud.point_count:
            raise ContractViolation(f"prediction has {len(pred)} rows, frame has {cloud.point_count} points")
        ego = quantize_f32(ego_flow(cloud.positions, pair.ego_motion))
        classes = cloud.class_id if cloud.class_id is not None else np.zeros(cloud.point_count, dtype=np.uint8)
        return cls(
            pred_flow=pred.flow - ego,
            gt_flow=cloud.gt_flow - ego,
            range_m=np.hypot(cloud.positions[:, 0], cloud.positions[:, 1]),
            is_foreground=classes != 0,
            class_id=classes,
            dt=pair.dt,
        )

    @classmethod
    def concatenate(cls, frames):
        """Pool several frames into one; all must share dt."""
        frames = list(frames)
        if not frames:
            raise ContractViolation("nothing to concatenate")
        dts = {frame.dt for frame in frames}
        if len(dts) != 1:
            raise ContractViolation(f"frames have different dt values: {sorted(dts)}")
        return cls(
            pred_flow=np.concatenate([f.pred_flow for f in frames]),
            gt_flow=np.concatenate([f.gt_flow for f in frames]),
            range_m=np.concatenate([f.range_m for f in frames]),
            is_foreground=np.concatenate([f.is_foreground for f in frames]),
            class_id=np.concatenate([f.class_id for f in frames]),
            dt=frames[0].dt,
        )


def epe(pred, gt, subset_mask=None):
    """Mean end-point error over a subset; None when the subset is empty."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ContractViolation(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    mask = np.ones(pred.shape[0], dtype=bool) if subset_mask is None else np.asarray(subset_mask, dtype=bool)
    if not mask.any():
        return None
    diff = pred[mask] - gt[mask]
    return float(np.sqrt((diff ** 2).sum(axis=1)).mean())


def classify_speed(gt_flow, dt, threshold_mps):
    """True where ||flow|| / dt is strictly above the threshold."""
    if not dt > 0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    speed = np.sqrt((np.asarray(gt_flow, dtype=np.float64).reshape(-1, 3) ** 2).sum(axis=1)) / dt
    return speed > threshold_mps * (1.0 + SPEED_TOLERANCE)


def _mean_present(values):
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _cell(errors, mask):
    count = int(mask.sum())
    return (float(errors[mask].mean()) if count else None), count


def three_way_epe(frame, threshold_mps=THREEWAY_THRESHOLD_MPS):
    """EPE on foreground-dynamic, foreground-static and background-static points.

    Background points that move are left out. `mean` averages the parts that
    have points.
    """
    dynamic = classify_speed(frame.gt_flow, frame.dt, threshold_mps)
    errors = frame.errors
    fg = frame.is_foreground
    parts = {}
    counts = {}
    for key, mask in (('FD', fg & dynamic), ('FS', fg & ~dynamic), ('BS', ~fg & ~dynamic)):
        parts[key], counts[key] = _cell(errors, mask)
    parts['mean'] = _mean_present([parts['FD'], parts['FS'], parts['BS']])
    counts['mean'] = counts['FD'] + counts['FS'] + counts['BS']
    return parts, counts


@dataclass(eq=False)
class BucketTable:
    """Per-class speed-bucket results.

    cells maps (class_id, bucket) -> (value, count, mean speed); bucket 0 holds
    the static EPE, higher buckets the EPE divided by the bucket's mean speed.
    """

    width_mps: float
    cap_mps: float
    cells: Dict[Tuple[int, int], Tuple[float, int, float]] = field(default_factory=dict)
    static_per_class: Dict[int, float] = field(default_factory=dict)
    dynamic_per_class: Dict[int, float] = field(default_factory=dict)
    static_mean: Optional[float] = None
    dynamic_normalized_mean: Optional[float] = None

    def bucket_label(self, bucket):
        lo = bucket * self.width_mps
        last = int(round(self.cap_mps / self.width_mps)) - 1
        if bucket >= last:
            return f'{lo:.1f}+'
        return f'{lo:.1f}-{lo + self.width_mps:.1f}'


def speed_buckets(speed, width_mps=BUCKET_WIDTH_MPS, cap_mps=BUCKET_CAP_MPS):
    """Bucket index per point; the bucket holding `cap_mps` is open-ended."""
    last = max(1, int(round(cap_mps / width_mps)) - 1)
    return np.minimum(np.floor(np.asarray(speed) / width_mps).astype(np.int64), last)


def bucket_normalized_epe(frame, width_mps=BUCKET_WIDTH_MPS, cap_mps=BUCKET_CAP_MPS):
    """Speed-bucketed EPE normalised by each bucket's mean speed."""
    if width_mps <= 0 or cap_mps <= width_mps:
        raise ContractViolation(f"bucket width {width_mps} and cap {cap_mps} are inconsistent")
    speed = frame.speed
    buckets = speed_buckets(speed, width_mps, cap_mps)
    errors = frame.errors
    table = BucketTable(width_mps=width_mps, cap_mps=cap_mps)
    for class_id in np.unique(frame.class_id):
        in_class = frame.class_id == class_id
        scores = []
        for bucket in np.unique(buckets[in_class]):
            mask = in_class & (buckets == bucket)
            count = int(mask.sum())
            mean_error = float(errors[mask].mean())
            mean_speed = float(speed[mask].mean())
            if bucket == 0:
                table.cells[(int(class_id), 0)] = (mean_error, count, mean_speed)
                table.static_per_class[int(class_id)] = mean_error
            else:
                normalized = mean_error / mean_speed
                table.cells[(int(class_id), int(bucket))] = (normalized, count, mean_speed)
                scores.append(normalized)
        if scores:
            table.dynamic_per_class[int(class_id)] = float(np.mean(scores))
    table.static_mean = _mean_present(list(table.static_per_class.values()))
    table.dynamic_normalized_mean = _mean_present(list(table.dynamic_per_class.values()))
    return table


def validate_bin_edges(bin_edges):
    """Upper edges of all but the last bin; a trailing inf is dropped.

    Raises:
        ContractViolation: edges not strictly ascending or not positive
    """
    edges = [float(e) for e in bin_edges]
    if edges and math.isinf(edges[-1]):
        edges = edges[:-1]
    if any(not math.isfinite(e) for e in edges):
        raise ContractViolation(f"bin edges must be finite apart from a trailing inf, got {list(bin_edges)}")
    if any(e <= 0 for e in edges) or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ContractViolation(f"bin edges must be positive and strictly ascending, got {list(bin_edges)}")
    return tuple(edges)


def bin_labels(edges):
    bounds = (0.0,) + tuple(edges)
    labels = [f'{lo:g}-{hi:g}' for lo, hi in zip(bounds, bounds[1:])]
    labels.append(f'{bounds[-1]:g}+')
    return labels


@dataclass(eq=False)
class RangeTable:
    """Per-bin {dynamic, static} EPE; absent cells are None."""

    edges: Tuple[float, ...]
    labels: Sequence[str]
    dynamic: Sequence[Optional[float]]
    static: Sequence[Optional[float]]
    dynamic_counts: Sequence[int]
    static_counts: Sequence[int]
    dynamic_mean: Optional[float]
    static_mean: Optional[float]


def range_wise_epe(frame, bin_edges=DEFAULT_BIN_EDGES, threshold_mps=RANGEWISE_THRESHOLD_MPS, strict=False):
    """EPE per horizontal-range bin, split by a strict speed threshold.

    Bins are [0, e0), [e0, e1), ..., [e_last, inf). Means average the
    non-empty bins of each motion class.

    Raises:
        ContractViolation: unsorted edges
        EmptyBinError: strict mode and a (bin, class) cell has no points
    """
    edges = validate_bin_edges(bin_edges)
    labels = bin_labels(edges)
    bins = np.searchsorted(np.asarray(edges), frame.range_m, side='right')
    dynamic = classify_speed(frame.gt_flow, frame.dt, threshold_mps)
    errors = frame.errors
    cells = {DYNAMIC: ([], []), STATIC: ([], [])}
    for index, label in enumerate(labels):
        in_bin = bins == index
        for motion, mask in ((DYNAMIC, in_bin & dynamic), (STATIC, in_bin & ~dynamic)):
            value, count = _cell(errors, mask)
            if value is None:
                if strict:
                    raise EmptyBinError(label, motion)
                logger.debug("range bin %s has no %s points", label, motion)
            cells[motion][0].append(value)
            cells[motion][1].append(count)
    return RangeTable(
        edges=edges,
        labels=labels,
        dynamic=cells[DYNAMIC][0],
        static=cells[STATIC][0],
        dynamic_counts=cells[DYNAMIC][1],
        static_counts=cells[STATIC][1],
        dynamic_mean=_mean_present(cells[DYNAMIC][0]),
        static_mean=_mean_present(cells[STATIC][0]),
    )


@dataclass(frozen=True)
class MetricConfig:
    bin_edges: Tuple[float, ...] = DEFAULT_BIN_EDGES
    rangewise_threshold_mps: float = RANGEWISE_THRESHOLD_MPS
    threeway_threshold_mps: float = THREEWAY_THRESHOLD_MPS
    bucket_width_mps: float = BUCKET_WIDTH_MPS
    bucket_cap_mps: float = BUCKET_CAP_MPS
    strict_bins: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'bin_edges', validate_bin_edges(self.bin_edges))
        for name in ('rangewise_threshold_mps', 'threeway_threshold_mps'):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")


@dataclass(eq=False)
class MetricsReport:
    """All three metric families for one (possibly pooled) frame."""

    threeway: Dict[str, Optional[float]]
    threeway_counts: Dict[str, int]
    bucket: BucketTable
    rangewise: RangeTable
    point_count: int

    @property
    def bin_edges(self):
        return self.rangewise.edges


def evaluate(frame, config=None):
    config = config or MetricConfig()
    threeway, counts = three_way_epe(frame, config.threeway_threshold_mps)
    report = MetricsReport(
        threeway=threeway,
        threeway_counts=counts,
        bucket=bucket_normalized_epe(frame, config.bucket_width_mps, config.bucket_cap_mps),
        rangewise=range_wise_epe(frame, config.bin_edges, config.rangewise_threshold_mps, config.strict_bins),
        point_count=len(frame),
    )
    logger.info(
        "evaluated %d points: three-way mean %s, range-wise dynamic %s / static %s",
        len(frame), report.threeway['mean'], report.rangewise.dynamic_mean, report.rangewise.static_mean,
    )
    return report
