"""
Minimal sparse convolution engine.

A rulebook lists, for every kernel offset k, the (input row, output row) pairs
whose coordinates satisfy  coord(in) = coord(out) * stride + k.  Offsets run
from -p to K-1-p per axis with p = (K-1)//2, which is the usual zero-padding
convention, so a submanifold rulebook and a dense cross-correlation agree on
every occupied site.

For a fixed offset each output row appears at most once, so the scatter-add
for one offset is a plain fancy-indexed add. Offsets are always accumulated in
the same order, which makes results independent of the worker thread count.
"""
from __future__ import annotations

import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from .exceptions import ContractViolation, NumericError, StructuralError
from .sparse_tensor import CoordIndex, SparseFeatureMap, in_bounds, pack_coords, unpack_keys

logger = logging.getLogger(__name__)

SUBMANIFOLD = 'submanifold'
STRIDED = 'strided'
INVERSE = 'inverse'

_thread_count = 1
_thread_lock = threading.Lock()


def set_thread_count(count):
    """Cap the number of workers used for per-offset GEMMs."""
    global _thread_count
    count = int(count)
    if count < 1:
        raise ContractViolation(f"thread count must be >= 1, got {count}")
    with _thread_lock:
        _thread_count = count
    logger.debug("sparse conv worker threads set to %d", count)


def get_thread_count():
    return _thread_count


class ConvCounters:
    """Logical work counters, independent of the machine the engine runs on."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.rulebook_pairs = 0
        self.macs = 0
        self.feature_rows = 0
        self.peak_feature_rows = 0
        self.conv_calls = 0
        self.union_rows = 0

    def note_union(self, rows):
        self.union_rows = int(rows)
        self.note_rows(rows)

    def note_rows(self, rows):
        self.feature_rows += int(rows)
        self.peak_feature_rows = max(self.peak_feature_rows, int(rows))

    def snapshot(self):
        return {
            'rulebook_pairs': self.rulebook_pairs,
            'macs': self.macs,
            'feature_rows': self.feature_rows,
            'peak_feature_rows': self.peak_feature_rows,
            'conv_calls': self.conv_calls,
            'union_rows': self.union_rows,
        }


counters = ConvCounters()


def _triple(value):
    if np.isscalar(value):
        return (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ContractViolation(f"expected three per-axis values, got {value}")
    return value


def kernel_offsets(kernel_shape, allow_even=False):
    """All kernel offsets, (dz, dy, dx) rows in row-major kernel order."""
    kernel_shape = _triple(kernel_shape)
    if min(kernel_shape) < 1:
        raise ContractViolation(f"kernel sizes must be positive, got {kernel_shape}")
    if not allow_even and any(k % 2 == 0 for k in kernel_shape):
        raise ContractViolation(f"kernel {kernel_shape} has an even size, its center is undefined")
    ranges = [range(-((k - 1) // 2), k - (k - 1) // 2) for k in kernel_shape]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(-1, 3)


def conv_output_shape(spatial_shape, kernel_shape, stride):
    """Per-axis output extent: (D + 2p - K) // s + 1."""
    kernel_shape = _triple(kernel_shape)
    stride = _triple(stride)
    out = []
    for d, k, s in zip(spatial_shape, kernel_shape, stride):
        if s < 1:
            raise ContractViolation(f"stride must be >= 1, got {stride}")
        p = (k - 1) // 2
        if d + 2 * p < k:
            raise ContractViolation(f"kernel {kernel_shape} does not fit grid {tuple(spatial_shape)}")
        out.append((d + 2 * p - k) // s + 1)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class Rulebook:
    """Per-offset (input row, output row) pair lists driving one convolution."""

    kind: str
    kernel_shape: Tuple[int, int, int]
    stride: Tuple[int, int, int]
    offsets: np.ndarray
    in_rows: Tuple[np.ndarray, ...]
    out_rows: Tuple[np.ndarray, ...]
    input_coords: np.ndarray
    output_coords: np.ndarray
    input_shape: Tuple[int, int, int]
    output_shape: Tuple[int, int, int]
    parent: Optional['Rulebook'] = None

    @property
    def kernel_volume(self):
        return self.offsets.shape[0]

    @property
    def pair_count(self):
        return int(sum(rows.size for rows in self.in_rows))

    @property
    def input_count(self):
        return self.input_coords.shape[0]

    @property
    def output_count(self):
        return self.output_coords.shape[0]

    def pairs(self, k):
        return self.in_rows[k], self.out_rows[k]

    @cached_property
    def inverted(self):
        """The transposed rulebook: routes output rows back to input rows."""
        if self.kind != STRIDED:
            raise ContractViolation(f"only strided rulebooks can be inverted, got {self.kind}")
        return Rulebook(
            kind=INVERSE,
            kernel_shape=self.kernel_shape,
            stride=self.stride,
            offsets=self.offsets,
            in_rows=self.out_rows,
            out_rows=self.in_rows,
            input_coords=self.output_coords,
            output_coords=self.input_coords,
            input_shape=self.output_shape,
            output_shape=self.input_shape,
            parent=self,
        )


def build_rulebook_submanifold(coords, kernel_shape, spatial_shape):
    """Rulebook whose output sites are exactly the input sites.

    Raises:
        ContractViolation: even kernel size
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    offsets = kernel_offsets(kernel_shape)
    index = CoordIndex(coords)
    all_rows = np.arange(coords.shape[0], dtype=np.int64)
    in_rows, out_rows = [], []
    for offset in offsets:
        found = index.lookup(coords + offset)
        hit = found >= 0
        in_rows.append(found[hit])
        out_rows.append(all_rows[hit])
    return Rulebook(
        kind=SUBMANIFOLD,
        kernel_shape=_triple(kernel_shape),
        stride=(1, 1, 1),
        offsets=offsets,
        in_rows=tuple(in_rows),
        out_rows=tuple(out_rows),
        input_coords=coords,
        output_coords=coords,
        input_shape=tuple(spatial_shape),
        output_shape=tuple(spatial_shape),
    )


def build_rulebook_strided(coords, kernel_shape, stride, spatial_shape):
    """Rulebook for a regular (downsampling) convolution.

    Every output site reached by the kernel footprint of at least one input is
    active; output coordinates come back in canonical order.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    offsets = kernel_offsets(kernel_shape, allow_even=True)
    stride_arr = np.asarray(_triple(stride), dtype=np.int64)
    out_shape = conv_output_shape(spatial_shape, kernel_shape, stride)

    reached = []
    for offset in offsets:
        shifted = coords - offset
        ok = np.all(shifted % stride_arr == 0, axis=1)
        target = shifted // stride_arr
        ok &= in_bounds(target, out_shape)
        rows = np.flatnonzero(ok)
        reached.append((rows, target[rows]))

    if coords.shape[0]:
        keys = np.unique(np.concatenate([pack_coords(target) for _, target in reached]))
    else:
        keys = np.zeros(0, dtype=np.int64)
    output_coords = unpack_keys(keys)
    index = CoordIndex(output_coords)
    in_rows = tuple(rows for rows, _ in reached)
    out_rows = tuple(index.lookup(target) for _, target in reached)
    return Rulebook(
        kind=STRIDED,
        kernel_shape=_triple(kernel_shape),
        stride=_triple(stride),
        offsets=offsets,
        in_rows=in_rows,
        out_rows=out_rows,
        input_coords=coords,
        output_coords=output_coords,
        input_shape=tuple(spatial_shape),
        output_shape=out_shape,
    )


def _offset_products(features, rulebook, weight):
    """x[in_rows(k)] @ W[k] for every offset, optionally on a worker pool."""

    def product(k):
        rows = rulebook.in_rows[k]
        if rows.size == 0:
            return None
        return features[rows] @ weight[k]

    workers = min(_thread_count, rulebook.kernel_volume)
    if workers <= 1:
        return [product(k) for k in range(rulebook.kernel_volume)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(product, range(rulebook.kernel_volume)))


def _check_weight(features, rulebook, weight, bias):
    if weight.ndim != 3 or weight.shape[0] != rulebook.kernel_volume:
        raise ContractViolation(
            f"weight shape {weight.shape} does not match kernel volume {rulebook.kernel_volume}"
        )
    if features.ndim != 2 or features.shape[1] != weight.shape[1]:
        raise ContractViolation(f"input width {features.shape[-1]} != weight input width {weight.shape[1]}")
    if features.shape[0] != rulebook.input_count:
        raise StructuralError(
            f"rulebook built for {rulebook.input_count} input rows, got {features.shape[0]}"
        )
    if bias is not None and bias.shape != (weight.shape[2],):
        raise ContractViolation(f"bias shape {bias.shape} != ({weight.shape[2]},)")


def conv_features(features, rulebook, weight, bias=None):
    """Gather-GEMM-scatter on raw feature matrices."""
    _check_weight(features, rulebook, weight, bias)
    dtype = np.result_type(features.dtype, weight.dtype)
    out = np.zeros((rulebook.output_count, weight.shape[2]), dtype=dtype)
    for k, product in enumerate(_offset_products(features, rulebook, weight)):
        if product is not None:
            out[rulebook.out_rows[k]] += product
    if bias is not None:
        out += bias

    pairs = rulebook.pair_count
    counters.conv_calls += 1
    counters.rulebook_pairs += pairs
    counters.macs += pairs * weight.shape[1] * weight.shape[2]
    counters.note_rows(rulebook.output_count)
    return out


def _require_input(x, rulebook):
    if x.spatial_shape != tuple(rulebook.input_shape) or not (
        x.coords.shape == rulebook.input_coords.shape and np.array_equal(x.coords, rulebook.input_coords)
    ):
        raise StructuralError(f"{rulebook.kind} rulebook was not built on these input coordinates")


def conv_forward(x, rulebook, weight, bias=None, layer='conv'):
    """Apply one sparse convolution to a feature map.

    Args:
        x: SparseFeatureMap on rulebook.input_coords
        rulebook: submanifold, strided or inverse rulebook
        weight: (kernel volume, C_in, C_out) array
        bias: optional (C_out,) array

    Returns:
        SparseFeatureMap on rulebook.output_coords
    """
    _require_input(x, rulebook)
    out = conv_features(x.features, rulebook, weight, bias)
    if not np.all(np.isfinite(out)):
        raise NumericError(layer)
    return SparseFeatureMap(rulebook.output_coords, out, rulebook.output_shape)


def conv_backward(grad_out, saved):
    """Reverse of conv_features.

    Args:
        grad_out: (M, C_out) gradient w.r.t. the output features
        saved: (x features, rulebook, weight) from the forward call

    Returns:
        (grad_x, grad_w, grad_b)
    """
    x, rulebook, weight = saved
    if isinstance(x, SparseFeatureMap):
        x = x.features
    if grad_out.shape != (rulebook.output_count, weight.shape[2]):
        raise ContractViolation(f"grad_out shape {grad_out.shape} does not match the forward output")
    grad_x = np.zeros_like(x, dtype=np.result_type(x.dtype, grad_out.dtype))
    grad_w = np.zeros_like(weight, dtype=np.result_type(weight.dtype, grad_out.dtype))
    for k in range(rulebook.kernel_volume):
        in_rows, out_rows = rulebook.pairs(k)
        if in_rows.size == 0:
            continue
        g = grad_out[out_rows]
        grad_x[in_rows] += g @ weight[k].T
        grad_w[k] = x[in_rows].T @ g
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def inverse_conv_forward(x, parent_rulebook, weight, bias=None, layer='inverse_conv'):
    """Transposed application of a strided rulebook.

    Output sites are exactly the parent's input sites.

    Raises:
        StructuralError: x is not on the parent's output coordinates
    """
    if parent_rulebook.kind != STRIDED:
        raise ContractViolation(f"inverse convolution needs a strided parent, got {parent_rulebook.kind}")
    if x.spatial_shape != tuple(parent_rulebook.output_shape) or not (
        x.coords.shape == parent_rulebook.output_coords.shape
        and np.array_equal(x.coords, parent_rulebook.output_coords)
    ):
        raise StructuralError("inverse convolution input does not match the parent rulebook's output sites")
    return conv_forward(x, parent_rulebook.inverted, weight, bias, layer=layer)


def dense_oracle_conv(x_dense, weight, kernel_shape, stride=1, bias=None):
    """Nested-loop dense cross-correlation with zero padding.

    Args:
        x_dense: (Z, Y, X, C_in) array
        weight: (kernel volume, C_in, C_out), offsets ordered as kernel_offsets

    Returns:
        (Zo, Yo, Xo, C_out) array
    """
    offsets = kernel_offsets(kernel_shape, allow_even=True)
    stride = _triple(stride)
    in_shape = x_dense.shape[:3]
    out_shape = conv_output_shape(in_shape, kernel_shape, stride)
    out = np.zeros(out_shape + (weight.shape[2],), dtype=np.result_type(x_dense.dtype, weight.dtype))
    for site in np.ndindex(*out_shape):
        acc = np.zeros(weight.shape[2], dtype=out.dtype)
        for k, offset in enumerate(offsets):
            src = tuple(site[a] * stride[a] + int(offset[a]) for a in range(3))
            if all(0 <= src[a] < in_shape[a] for a in range(3)):
                acc += x_dense[src] @ weight[k]
        if bias is not None:
            acc += bias
        out[site] = acc
    return out


def dense_oracle_inverse_conv(x_dense, weight, kernel_shape, stride, out_spatial_shape, bias=None):
    """Nested-loop dense transposed convolution back onto `out_spatial_shape`."""
    offsets = kernel_offsets(kernel_shape, allow_even=True)
    stride = _triple(stride)
    out_shape = tuple(out_spatial_shape)
    out = np.zeros(out_shape + (weight.shape[2],), dtype=np.result_type(x_dense.dtype, weight.dtype))
    for site in np.ndindex(*x_dense.shape[:3]):
        for k, offset in enumerate(offsets):
            dst = tuple(site[a] * stride[a] + int(offset[a]) for a in range(3))
            if all(0 <= dst[a] < out_shape[a] for a in range(3)):
                out[dst] += x_dense[site] @ weight[k]
    if bias is not None:
        out += bias
    return out
