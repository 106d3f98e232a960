"""
The full flow network.

    remove ground -> ego-compensate scan t -> joint voxelization
    -> per-scan VFE with virtual voxels -> channel concat -> sparse U-Net
    -> unpillar to scan-t points -> point head -> residual flow

Total flow is ego flow plus the predicted residual on processed points, and
ego flow alone on points that were cropped or removed as ground.

Parameters are a flat name -> array dict; names follow the weight-file
convention (`vfe.0.w`, `enc.1.sub0.norm.gamma`, `dec.0.reduce.b`, ...).
"""
from __future__ import annotations

import logging
from collections import OrderedDict
import dataclasses
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import layers, spconv
from .core import FlowField, apply_transform, compose_flow, ego_flow, quantize_f32, remove_ground
from .exceptions import ContractViolation, StructuralError
from .fusion import encode_scan, joint_voxelize
from .scene_io import WeightBundle, make_rng
from .sparse_tensor import SparseFeatureMap
from .voxelizer import POINT_FEATURES, POOLING_MODES, VfeParams, augment_point_features

logger = logging.getLogger(__name__)

NORM_TENSORS = ('gamma', 'beta', 'running_mean', 'running_var')
RUNNING_TENSORS = ('running_mean', 'running_var')
HEAD_LAYERS = 2


@dataclass(frozen=True)
class UnetConfig:
    """Architecture of the VFE, sparse U-Net and point head."""

    vfe_channels: int = 32
    vfe_hidden: int = 32
    encoder_widths: Tuple[int, ...] = (64, 128, 256)
    kernel_size: int = 3
    stride: int = 2
    final_width: int = 64
    head_hidden: int = 64
    norm: bool = True
    pooling: str = 'max'

    def __post_init__(self):
        object.__setattr__(self, 'encoder_widths', tuple(int(w) for w in self.encoder_widths))
        widths = (self.vfe_channels, self.vfe_hidden, self.final_width, self.head_hidden) + self.encoder_widths
        if not self.encoder_widths:
            raise ContractViolation("the U-Net needs at least one stage")
        if min(widths) < 1:
            raise ContractViolation(f"all widths must be positive, got {widths}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ContractViolation(f"kernel size must be odd, got {self.kernel_size}")
        if self.stride < 1:
            raise ContractViolation(f"stride must be >= 1, got {self.stride}")
        if self.pooling not in POOLING_MODES:
            raise ContractViolation(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")

    @property
    def stage_count(self):
        return len(self.encoder_widths)

    @property
    def fused_width(self):
        return 2 * self.vfe_channels

    @classmethod
    def toy(cls):
        """Small configuration used for overfitting checks."""
        return cls(vfe_channels=8, vfe_hidden=8, encoder_widths=(16, 32), final_width=16, head_hidden=16, norm=False)


def param_shapes(cfg, grid):
    """Ordered name -> shape of every tensor the configuration needs."""
    kvol = int(np.prod(grid.kernel_shape(cfg.kernel_size)))
    shapes = OrderedDict()

    def dense(prefix, cin, cout, norm):
        shapes[f'{prefix}.w'] = (cin, cout)
        shapes[f'{prefix}.b'] = (cout,)
        if norm:
            for which in NORM_TENSORS:
                shapes[f'{prefix}.norm.{which}'] = (cout,)

    def conv(prefix, cin, cout):
        shapes[f'{prefix}.w'] = (kvol, cin, cout)
        shapes[f'{prefix}.b'] = (cout,)
        if cfg.norm:
            for which in NORM_TENSORS:
                shapes[f'{prefix}.norm.{which}'] = (cout,)

    dense('vfe.0', POINT_FEATURES, cfg.vfe_hidden, cfg.norm)
    dense('vfe.1', cfg.vfe_hidden, cfg.vfe_channels, cfg.norm)

    width = cfg.fused_width
    for s, out in enumerate(cfg.encoder_widths):
        conv(f'enc.{s}.down', width, out)
        conv(f'enc.{s}.sub0', out, out)
        conv(f'enc.{s}.sub1', out, out)
        width = out

    for s in reversed(range(cfg.stage_count)):
        w = cfg.encoder_widths[s]
        out = cfg.encoder_widths[s - 1] if s > 0 else cfg.final_width
        conv(f'dec.{s}.lateral', w, w)
        conv(f'dec.{s}.merge', 2 * w, w)
        dense(f'dec.{s}.reduce', 2 * w, w, norm=False)
        conv(f'dec.{s}.up', w, out)

    dense('head.0', cfg.final_width + cfg.vfe_channels + POINT_FEATURES, cfg.head_hidden, norm=False)
    dense('head.1', cfg.head_hidden, 3, norm=False)
    return shapes


def is_trainable(name):
    return not name.endswith(RUNNING_TENSORS)


class SsfParams:
    """All network tensors plus the configuration they were built for."""

    def __init__(self, tensors, config):
        self.tensors = OrderedDict(tensors)
        self.config = config

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def trainable_names(self):
        return [name for name in self.tensors if is_trainable(name)]

    @property
    def dtype(self):
        return self.tensors['vfe.0.w'].dtype

    @property
    def vfe(self):
        return VfeParams(self.tensors, norm=self.config.norm)

    def parameter_count(self):
        return int(sum(self.tensors[name].size for name in self.trainable_names()))

    def copy(self):
        return SsfParams({name: value.copy() for name, value in self.tensors.items()}, self.config)

    def astype(self, dtype):
        return SsfParams({name: value.astype(dtype) for name, value in self.tensors.items()}, self.config)

    def replace(self, updates):
        tensors = OrderedDict(self.tensors)
        for name, value in updates.items():
            if name not in tensors:
                raise ContractViolation(f"unknown parameter {name!r}")
            tensors[name] = np.asarray(value, dtype=tensors[name].dtype)
        return SsfParams(tensors, self.config)

    def validate(self, grid):
        expected = param_shapes(self.config, grid)
        missing = [name for name in expected if name not in self.tensors]
        if missing:
            raise ContractViolation(f"missing parameters: {', '.join(missing[:5])}")
        extra = [name for name in self.tensors if name not in expected]
        if extra:
            raise ContractViolation(f"unexpected parameters: {', '.join(extra[:5])}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ContractViolation(f"{name} has shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ContractViolation(f"{name} contains non-finite values")
        return self

    def to_bundle(self):
        return WeightBundle.from_arrays(self.tensors)

    @classmethod
    def from_bundle(cls, bundle, grid, stride=2, pooling='max'):
        tensors = bundle.as_arrays()
        return cls(tensors, infer_unet_config(tensors, grid, stride, pooling)).validate(grid)


def _require(tensors, name):
    if name not in tensors:
        raise ContractViolation(f"weight set has no tensor {name!r}")
    return tensors[name]


def infer_unet_config(tensors, grid, stride=2, pooling='max'):
    """Recover the architecture from tensor shapes.

    Stride and pooling leave no trace in the shapes and come from the caller.
    """
    widths = []
    kvol = None
    while f'enc.{len(widths)}.down.w' in tensors:
        w = tensors[f'enc.{len(widths)}.down.w']
        kvol = w.shape[0]
        widths.append(w.shape[2])
    if not widths:
        raise ContractViolation("weight set has no encoder stages")
    root = 2 if grid.is_pillar else 3
    kernel = int(round(kvol ** (1.0 / root)))
    if kernel ** root != kvol:
        raise ContractViolation(f"kernel volume {kvol} does not fit a {'2D' if root == 2 else '3D'} kernel")
    return UnetConfig(
        vfe_channels=_require(tensors, 'vfe.1.w').shape[1],
        vfe_hidden=_require(tensors, 'vfe.0.w').shape[1],
        encoder_widths=tuple(widths),
        kernel_size=kernel,
        stride=stride,
        final_width=_require(tensors, 'dec.0.up.w').shape[2],
        head_hidden=_require(tensors, 'head.0.w').shape[1],
        norm='vfe.0.norm.gamma' in tensors,
        pooling=pooling,
    )


def init_params(cfg, seed, grid, dtype=np.float32):
    """Fan-in scaled uniform initialization, deterministic in `seed`.

    Weights and biases draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm
    layers start as identity (gamma 1, beta 0, running stats 0 / 1).
    """
    rng = make_rng(seed)
    tensors = OrderedDict()
    fan_in = 1
    for name, shape in param_shapes(cfg, grid).items():
        if name.endswith('.w'):
            fan_in = int(np.prod(shape[:-1]))
        bound = 1.0 / np.sqrt(fan_in)
        if name.endswith(('.w', '.b')):
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(('.gamma', '.running_var')):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        tensors[name] = value.astype(dtype)
    return SsfParams(tensors, cfg)


# U-Net

@dataclass(frozen=True, eq=False)
class UnetPlan:
    """Rulebooks for every resolution level of one input coordinate set.

    Level 0 is the fused input; level s+1 is the output of encoder stage s.
    """

    down: Tuple[spconv.Rulebook, ...]
    subm: Tuple[Optional[spconv.Rulebook], ...]

    def coords(self, level):
        return self.down[0].input_coords if level == 0 else self.down[level - 1].output_coords


def build_unet_plan(coords, spatial_shape, cfg, grid):
    kernel = grid.kernel_shape(cfg.kernel_size)
    stride = grid.stride_shape(cfg.stride)
    down, subm = [], [None]
    shape = tuple(spatial_shape)
    for _ in range(cfg.stage_count):
        rulebook = spconv.build_rulebook_strided(coords, kernel, stride, shape)
        down.append(rulebook)
        coords, shape = rulebook.output_coords, rulebook.output_shape
        subm.append(spconv.build_rulebook_submanifold(coords, kernel, shape))
    return UnetPlan(down=tuple(down), subm=tuple(subm))


def _conv_block(tape, x, rulebook, params, prefix, training):
    t = params.tensors
    x = layers.sparse_conv(
        tape, x, rulebook, tape.param(f'{prefix}.w', t[f'{prefix}.w']),
        tape.param(f'{prefix}.b', t[f'{prefix}.b']), name=prefix,
    )
    if params.config.norm:
        x = layers.batch_norm(
            tape, x,
            tape.param(f'{prefix}.norm.gamma', t[f'{prefix}.norm.gamma']),
            tape.param(f'{prefix}.norm.beta', t[f'{prefix}.norm.beta']),
            t[f'{prefix}.norm.running_mean'], t[f'{prefix}.norm.running_var'],
            training, name=f'{prefix}.norm',
        )
    x = layers.relu(tape, x, name=f'{prefix}.relu')
    return layers.check_finite(x, prefix)


def _same_level(plan, level, rulebook_coords, where):
    expected = plan.coords(level)
    if rulebook_coords.shape != expected.shape or not np.array_equal(rulebook_coords, expected):
        raise StructuralError(f"{where}: coordinate set differs from encoder level {level}")


def unet_nodes(tape, fused, plan, params, training):
    """Run encoder and decoder on a fused feature node."""
    cfg = params.config
    x = fused
    skips = []
    for s in range(cfg.stage_count):
        x = _conv_block(tape, x, plan.down[s], params, f'enc.{s}.down', training)
        x = _conv_block(tape, x, plan.subm[s + 1], params, f'enc.{s}.sub0', training)
        x = _conv_block(tape, x, plan.subm[s + 1], params, f'enc.{s}.sub1', training)
        skips.append(x)

    deep = skips[-1]
    deep_coords = plan.coords(cfg.stage_count)
    t = params.tensors
    for s in reversed(range(cfg.stage_count)):
        _same_level(plan, s + 1, deep_coords, f'decoder stage {s}')
        lateral = _conv_block(tape, skips[s], plan.subm[s + 1], params, f'dec.{s}.lateral', training)
        merged = layers.concat_channels(tape, [deep, lateral], name=f'dec.{s}.concat')
        merged_conv = _conv_block(tape, merged, plan.subm[s + 1], params, f'dec.{s}.merge', training)
        reduced = layers.linear(
            tape, merged, tape.param(f'dec.{s}.reduce.w', t[f'dec.{s}.reduce.w']),
            tape.param(f'dec.{s}.reduce.b', t[f'dec.{s}.reduce.b']), name=f'dec.{s}.reduce',
        )
        x = layers.add(tape, merged_conv, reduced, name=f'dec.{s}.sum')
        up = plan.down[s].inverted
        deep = _conv_block(tape, x, up, params, f'dec.{s}.up', training)
        deep_coords = up.output_coords
    _same_level(plan, 0, deep_coords, 'decoder output')
    return deep


def unet_forward(fused, params, grid, mode='eval'):
    """Sparse U-Net on a fused feature map; output lives on the fused coords.

    Raises:
        ContractViolation: fused width differs from 2 x VFE channels
        StructuralError: a skip connection joins different coordinate sets
    """
    cfg = params.config
    if fused.channel_count != cfg.fused_width:
        raise ContractViolation(f"fused width {fused.channel_count} != expected {cfg.fused_width}")
    if fused.row_count == 0:
        return SparseFeatureMap(fused.coords, np.zeros((0, cfg.final_width), dtype=params.dtype), fused.spatial_shape)
    tape = layers.NullTape()
    plan = build_unet_plan(fused.coords, fused.spatial_shape, cfg, grid)
    x = tape.constant(fused.features.astype(params.dtype, copy=False), 'fused')
    out = unet_nodes(tape, x, plan, params, training=(mode == 'train'))
    return SparseFeatureMap(fused.coords, out.value, fused.spatial_shape)


def unpillar(voxel_feats, jv):
    """Give every kept scan-t point the feature row of its voxel."""
    if voxel_feats.coords.shape != jv.union_coords.shape or not np.array_equal(voxel_feats.coords, jv.union_coords):
        raise StructuralError("unpillar: voxel features are not on the union coordinates")
    return voxel_feats.features[jv.assignment_t.point_to_voxel]


def head_nodes(tape, decoder_pt, vfe_pt, offsets9, params):
    t = params.tensors
    x = layers.concat_channels(tape, [decoder_pt, vfe_pt, offsets9], name='head.input')
    for i in range(HEAD_LAYERS):
        x = layers.linear(
            tape, x, tape.param(f'head.{i}.w', t[f'head.{i}.w']),
            tape.param(f'head.{i}.b', t[f'head.{i}.b']), name=f'head.{i}',
        )
        if i < HEAD_LAYERS - 1:
            x = layers.relu(tape, x, name=f'head.{i}.relu')
    return layers.check_finite(x, 'head')


def head_forward(decoder_pt_feats, vfe_pt_feats, offsets9, params):
    """Per-point residual flow from [decoder | VFE | 9-dim augmented] features."""
    tape = layers.NullTape()
    dtype = params.dtype
    nodes = [tape.constant(np.asarray(a).astype(dtype, copy=False)) for a in (decoder_pt_feats, vfe_pt_feats, offsets9)]
    return head_nodes(tape, *nodes, params).value


# Full pipeline

@dataclass(eq=False)
class PipelineState:
    """Everything one forward pass produced, kept for the backward pass."""

    residual: Optional[layers.Node]
    processed_rows: np.ndarray
    ego: np.ndarray
    jv: Optional[object] = None
    fused: Optional[layers.Node] = None
    voxels_t: Optional[layers.Node] = None
    voxels_t1: Optional[layers.Node] = None


def run_pipeline(pair, params, grid, tape, training=False):
    """Forward pass recording onto `tape`; see ssf_forward."""
    cfg = params.config
    cloud_t, rows_t = remove_ground(pair.cloud_t)
    cloud_t1, _ = remove_ground(pair.cloud_t1)
    compensated = apply_transform(cloud_t.positions, pair.ego_motion)
    ego = ego_flow(pair.cloud_t.positions, pair.ego_motion)

    jv = joint_voxelize(compensated, cloud_t1.positions, grid)
    if jv.assignment_t.kept_count == 0:
        logger.debug("no scan-t point survived cropping; output is ego flow only")
        return PipelineState(residual=None, processed_rows=np.zeros(0, dtype=np.int64), ego=ego, jv=jv)

    feats_t = augment_point_features(compensated, jv.assignment_t, grid)
    feats_t1 = augment_point_features(cloud_t1.positions, jv.assignment_t1, grid)
    vfe = params.vfe
    voxels_t, points_t = encode_scan(tape, jv, jv.assignment_t, jv.mask_t, feats_t, vfe, grid, training, cfg.pooling)
    voxels_t1, _ = encode_scan(tape, jv, jv.assignment_t1, jv.mask_t1, feats_t1, vfe, grid, training, cfg.pooling)
    fused = layers.concat_channels(tape, [voxels_t, voxels_t1], name='fused')
    spconv.counters.note_union(jv.union_count)

    plan = build_unet_plan(jv.union_coords, grid.spatial_shape, cfg, grid)
    decoded = unet_nodes(tape, fused, plan, params, training)
    decoder_pt = layers.gather_rows(tape, decoded, jv.assignment_t.point_to_voxel, name='unpillar')
    offsets9 = tape.constant(feats_t.astype(params.dtype), 'head.offsets')
    residual = head_nodes(tape, decoder_pt, points_t, offsets9, params)
    return PipelineState(
        residual=residual,
        processed_rows=rows_t[jv.assignment_t.kept_point_rows],
        ego=ego,
        jv=jv,
        fused=fused,
        voxels_t=voxels_t,
        voxels_t1=voxels_t1,
    )


def assemble_flow(state, point_count):
    """Total flow: ego everywhere, plus the residual on processed rows."""
    residual = np.zeros((point_count, 3))
    covered = np.zeros(point_count, dtype=bool)
    if state.residual is not None:
        residual[state.processed_rows] = state.residual.value
        covered[state.processed_rows] = True
    return compose_flow(FlowField.dense(state.ego), FlowField(residual, covered))


def ssf_forward(pair, params, grid, mode='eval'):
    """Predict per-point flow for pair.cloud_t.

    Returns:
        FlowField, valid everywhere, with `processed` marking network rows
    """
    if mode not in ('train', 'eval'):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    state = run_pipeline(pair, params, grid, layers.NullTape(), training=(mode == 'train'))
    return assemble_flow(state, pair.cloud_t.point_count)


def ego_motion_baseline(pair):
    """Zero-residual prediction: every point moves with the ego flow only.

    The flow is rounded to single precision, the precision flow files carry.
    """
    flow = quantize_f32(ego_flow(pair.cloud_t.positions, pair.ego_motion))
    n = pair.cloud_t.point_count
    return FlowField(flow, np.ones(n, dtype=bool), np.zeros(n, dtype=bool))


def with_config(params, **changes):
    """Same tensors, adjusted non-shape settings (stride, pooling)."""
    return SsfParams(params.tensors, dataclasses.replace(params.config, **changes))
