"""
Loss, reverse-mode pipeline gradients and an Adam loop for toy overfitting.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import layers
from .exceptions import ContractViolation, NumericError, TrainingDivergedError
from .metrics import BUCKET_WIDTH_MPS, RANGEWISE_THRESHOLD_MPS
from .network import SsfParams, run_pipeline

logger = logging.getLogger(__name__)

DEFAULT_LR = 8e-3
TOY_LR = 1e-3

OBJECTIVES = ('l2', 'speed_bucketed')
# Residual speed buckets [0, 0.4), [0.4, 1.4), [1.4, inf) in m/s.
SPEED_BUCKET_EDGES_MPS = (BUCKET_WIDTH_MPS, RANGEWISE_THRESHOLD_MPS)


@dataclass(frozen=True)
class FlowLoss:
    value: float
    empty: bool = False


def flow_loss(pred, gt, processed_mask):
    """Mean L2 distance between predicted and GT flow over processed rows.

    No processed rows gives a loss of 0 with `empty` set.
    """
    if len(pred) != len(gt):
        raise ContractViolation(f"flow length mismatch: {len(pred)} vs {len(gt)}")
    mask = np.asarray(processed_mask, dtype=bool)
    if mask.shape != (len(pred),):
        raise ContractViolation("processed mask must have one entry per flow row")
    if not mask.any():
        logger.warning("flow loss over zero processed points, reporting 0")
        return FlowLoss(0.0, empty=True)
    diff = pred.flow[mask] - gt.flow[mask]
    return FlowLoss(float(np.sqrt((diff ** 2).sum(axis=1)).mean()))


def speed_bucket_weights(residual_gt, dt, edges=SPEED_BUCKET_EDGES_MPS):
    """Row weights giving every non-empty residual speed bucket the same share.

    Rows of one bucket split that bucket's share evenly; the weights sum to 1.
    """
    residual_gt = np.asarray(residual_gt, dtype=np.float64).reshape(-1, 3)
    speed = np.sqrt((residual_gt ** 2).sum(axis=1)) / dt
    bucket = np.searchsorted(np.asarray(edges, dtype=np.float64), speed, side='right')
    counts = np.bincount(bucket, minlength=len(edges) + 1)
    return 1.0 / (counts[bucket] * np.count_nonzero(counts))


def speed_bucketed_loss(pred, gt, ego, processed_mask, dt):
    """Flow loss with processed rows weighted by speed_bucket_weights.

    Buckets come from the speed of the GT flow left after removing ego flow.
    """
    if not (len(pred) == len(gt) == len(ego)):
        raise ContractViolation(f"flow length mismatch: {len(pred)}, {len(gt)}, {len(ego)}")
    mask = np.asarray(processed_mask, dtype=bool)
    if mask.shape != (len(pred),):
        raise ContractViolation("processed mask must have one entry per flow row")
    if not mask.any():
        logger.warning("flow loss over zero processed points, reporting 0")
        return FlowLoss(0.0, empty=True)
    weights = speed_bucket_weights(gt.flow[mask] - ego.flow[mask], dt)
    errors = np.sqrt(((pred.flow[mask] - gt.flow[mask]) ** 2).sum(axis=1))
    return FlowLoss(float((errors * weights).sum()))


@dataclass(eq=False)
class OptimState:
    """Adam moments, one pair per trainable tensor."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params, lr, **kwargs):
        names = params.trainable_names()
        return cls(
            lr=lr,
            first={name: np.zeros_like(params[name]) for name in names},
            second={name: np.zeros_like(params[name]) for name in names},
            **kwargs,
        )


def adam_step(params, grads, state):
    """One Adam update; returns new params and advances `state`."""
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    updates = {}
    for name, grad in grads.items():
        if name not in state.first:
            raise ContractViolation(f"no optimizer state for {name!r}")
        m = state.beta1 * state.first[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second[name] + (1.0 - state.beta2) * grad * grad
        state.first[name] = m.astype(params[name].dtype)
        state.second[name] = v.astype(params[name].dtype)
        step = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        updates[name] = params[name] - step.astype(params[name].dtype)
    return params.replace(updates)


@dataclass(eq=False)
class Gradients:
    loss: float
    grads: Dict[str, np.ndarray]
    stat_updates: list
    empty: bool = False
    state: object = None


def backward_pipeline(pair, params, grid, training=True, objective='l2'):
    """Loss and gradients of every trainable tensor for one frame pair.

    The forward pass records onto a fresh tape; the loss is the L2 error of
    the total flow on processed rows against pair.cloud_t.gt_flow, a plain
    mean for objective 'l2' and speed-bucket weighted for 'speed_bucketed'.
    """
    if objective not in OBJECTIVES:
        raise ContractViolation(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    gt = pair.cloud_t.gt_flow
    if gt is None:
        raise ContractViolation("training pairs need ground-truth flow (GF0)")
    tape = layers.Tape()
    for name in params.trainable_names():
        tape.param(name, params[name])
    state = run_pipeline(pair, params, grid, tape, training)
    if state.residual is None:
        logger.warning("pair has no processed points; zero loss and zero gradients")
        zeros = {name: np.zeros_like(params[name]) for name in params.trainable_names()}
        return Gradients(0.0, zeros, [], empty=True, state=state)

    rows = state.processed_rows
    offset = state.ego[rows] - gt[rows]
    diff = layers.shift(tape, state.residual, offset, name='loss.diff')
    weights = None
    if objective == 'speed_bucketed':
        weights = speed_bucket_weights(gt[rows] - state.ego[rows], pair.dt)
    loss = layers.mean_l2(tape, diff, weights)
    tape.backward(loss)
    grads = tape.gradients()
    return Gradients(float(loss.value), grads, list(tape.stat_updates), state=state)


def apply_stat_updates(params, stat_updates):
    """Write the running statistics gathered during a training step.

    A norm layer that ran more than once in the step (the VFE runs once per
    scan) gets the average of its updates.
    """
    grouped = {}
    for name, mean, var in stat_updates:
        grouped.setdefault(name, []).append((mean, var))
    updates = {}
    for name, pairs in grouped.items():
        updates[f"{name}.running_mean"] = np.mean([mean for mean, _ in pairs], axis=0)
        updates[f"{name}.running_var"] = np.mean([var for _, var in pairs], axis=0)
    return params.replace(updates) if updates else params


@dataclass(eq=False)
class FitResult:
    params: SsfParams
    loss_trace: List[float]


def fit(pairs, params, grid, steps, lr=TOY_LR, log_every=100, training=True, objective='l2'):
    """Adam over the pairs in fixed round-robin order.

    Running norm statistics are written together with the optimizer step, so
    lr=0 leaves every tensor untouched.

    Raises:
        TrainingDivergedError: the loss became NaN or infinite
    """
    if not pairs:
        raise ContractViolation("fit needs at least one frame pair")
    if steps < 0:
        raise ContractViolation(f"steps must be >= 0, got {steps}")
    if lr < 0:
        raise ContractViolation(f"lr must be >= 0, got {lr}")
    if objective not in OBJECTIVES:
        raise ContractViolation(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    state = OptimState.fresh(params, lr)
    trace = []
    for step in range(steps):
        try:
            result = backward_pipeline(pairs[step % len(pairs)], params, grid, training, objective)
        except NumericError as exc:
            raise TrainingDivergedError(step, float("nan")) from exc
        if not math.isfinite(result.loss):
            raise TrainingDivergedError(step, result.loss)
        trace.append(result.loss)
        if lr > 0:
            params = adam_step(params, result.grads, state)
            params = apply_stat_updates(params, result.stat_updates)
        if log_every and (step % log_every == 0 or step == steps - 1):
            logger.info("step %d/%d loss %.6f", step + 1, steps, result.loss)
    return FitResult(params=params, loss_trace=trace)


def write_loss_trace(trace, path):
    with Path(path).open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['step', 'loss'])
        for step, loss in enumerate(trace):
            writer.writerow([step, repr(float(loss))])
