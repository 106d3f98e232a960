"""
Differentiable row-wise operations and the tape that records them.

Every op takes the tape as its first argument. On a NullTape (inference) ops
just compute values; on a Tape they also push a backward closure, and
Tape.backward() replays those closures in reverse to accumulate gradients
into parameter nodes.
"""
from __future__ import annotations

import logging

import numpy as np

from . import spconv
from .exceptions import ContractViolation, NumericError

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Node:
    """A value plus the gradient accumulated for it."""

    __slots__ = ('value', 'grad', 'name', 'requires_grad')

    def __init__(self, value, name=None, requires_grad=True):
        self.value = value
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Node({self.name!r}, shape={getattr(self.value, 'shape', ())})"


class Tape:
    """Records backward closures for reverse-mode accumulation."""

    recording = True

    def __init__(self):
        self._entries = []
        self.params = {}
        self.stat_updates = []

    def param(self, name, value):
        node = self.params.get(name)
        if node is None:
            node = Node(value, name)
            self.params[name] = node
        return node

    def constant(self, value, name=None):
        return Node(value, name, requires_grad=False)

    def record(self, out, backward, *inputs):
        out.requires_grad = any(node.requires_grad for node in inputs)
        if out.requires_grad:
            self._entries.append((out, backward))
        return out

    def note_stats(self, name, mean, var):
        self.stat_updates.append((name, mean, var))

    def backward(self, out, grad=None):
        if not out.requires_grad:
            raise ContractViolation("backward called on a value that depends on no parameters")
        out.grad = np.ones_like(out.value) if grad is None else np.asarray(grad, dtype=out.value.dtype)
        for node, backward in reversed(self._entries):
            if node.grad is not None:
                backward(node.grad)

    def gradients(self):
        """name -> gradient, zeros for parameters the output never reached."""
        return {
            name: node.grad if node.grad is not None else np.zeros_like(node.value)
            for name, node in self.params.items()
        }


class NullTape(Tape):
    """Inference: no closures, no gradients."""

    recording = False

    def param(self, name, value):
        return Node(value, name, requires_grad=False)

    def record(self, out, backward, *inputs):
        out.requires_grad = False
        return out

    def note_stats(self, name, mean, var):
        pass

    def backward(self, out, grad=None):
        raise ContractViolation("no saved state: the forward pass ran without a recording tape")


def accumulate(node, grad):
    if not node.requires_grad:
        return
    grad = np.asarray(grad, dtype=node.value.dtype)
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad = node.grad + grad


def check_finite(node, layer):
    if not np.all(np.isfinite(node.value)):
        raise NumericError(layer)
    return node


def linear(tape, x, w, b=None, name='linear'):
    value = x.value @ w.value
    if b is not None:
        value = value + b.value
    out = Node(value, name)

    def backward(g):
        accumulate(x, g @ w.value.T)
        accumulate(w, x.value.T @ g)
        if b is not None:
            accumulate(b, g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return tape.record(out, backward, *inputs)


def relu(tape, x, name='relu'):
    active = x.value > 0
    out = Node(np.where(active, x.value, 0).astype(x.value.dtype, copy=False), name)

    def backward(g):
        accumulate(x, np.where(active, g, 0))

    return tape.record(out, backward, x)


def batch_norm(tape, x, gamma, beta, running_mean, running_var, training, row_mask=None, name='norm'):
    """Batch normalisation over rows.

    In training mode statistics come from the rows selected by `row_mask`
    only; every row is then normalised with them. The running statistics are
    not touched here: the new values are handed to the tape, and the caller
    decides when to apply them.
    """
    xv = x.value
    mask = np.ones(xv.shape[0], dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    m = int(mask.sum())
    if training and m > 0:
        selected = xv[mask]
        mean = selected.mean(axis=0)
        var = ((selected - mean) ** 2).mean(axis=0)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        tape.note_stats(
            name,
            (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mean,
            (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased,
        )
        batch_stats = True
    else:
        mean, var = running_mean, running_var
        batch_stats = False

    scale = np.sqrt(var + BN_EPS).astype(xv.dtype, copy=False)
    x_hat = ((xv - mean) / scale).astype(xv.dtype, copy=False)
    out = Node(gamma.value * x_hat + beta.value, name)

    def backward(g):
        accumulate(gamma, (g * x_hat).sum(axis=0))
        accumulate(beta, g.sum(axis=0))
        g_hat = g * gamma.value
        grad = g_hat / scale
        if batch_stats:
            s1 = g_hat.sum(axis=0)
            s2 = (g_hat * x_hat).sum(axis=0)
            grad = grad - mask[:, None] * (s1 + x_hat * s2) / (m * scale)
        accumulate(x, grad)

    return tape.record(out, backward, x, gamma, beta)


def concat_channels(tape, nodes, name='concat'):
    widths = [node.value.shape[1] for node in nodes]
    out = Node(np.concatenate([node.value for node in nodes], axis=1), name)
    bounds = np.cumsum([0] + widths)

    def backward(g):
        for node, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            accumulate(node, g[:, lo:hi])

    return tape.record(out, backward, *nodes)


def add(tape, a, b, name='add'):
    out = Node(a.value + b.value, name)

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return tape.record(out, backward, a, b)


def shift(tape, x, constant, name='shift'):
    """x + constant, constant carries no gradient."""
    out = Node(x.value + constant, name)

    def backward(g):
        accumulate(x, g)

    return tape.record(out, backward, x)


def gather_rows(tape, x, rows, name='gather'):
    rows = np.asarray(rows, dtype=np.int64)
    out = Node(x.value[rows], name)

    def backward(g):
        grad = np.zeros_like(x.value)
        np.add.at(grad, rows, g)
        accumulate(x, grad)

    return tape.record(out, backward, x)


def mask_rows(tape, x, keep, name='mask'):
    """Zero every row where keep is false (exact zeros, not x * 0)."""
    keep = np.asarray(keep, dtype=bool)[:, None]
    out = Node(np.where(keep, x.value, 0).astype(x.value.dtype, copy=False), name)

    def backward(g):
        accumulate(x, np.where(keep, g, 0))

    return tape.record(out, backward, x)


def _segments(segments, count):
    segments = np.asarray(segments, dtype=np.int64)
    order = np.argsort(segments, kind='stable')
    ordered = segments[order]
    starts = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1]]) if ordered.size else np.zeros(0, dtype=np.int64)
    present = ordered[starts]
    if present.size != count or not np.array_equal(present, np.arange(count)):
        raise ContractViolation("every segment needs at least one member row")
    return order, ordered, starts


def segment_max(tape, x, segments, count, name='max_pool'):
    """Per-segment channel-wise max.

    The gradient is routed to the lowest member row among ties.
    """
    order, ordered, starts = _segments(segments, count)
    if count == 0:
        return tape.record(Node(np.zeros((0, x.value.shape[1]), dtype=x.value.dtype), name), lambda g: None, x)
    xs = x.value[order]
    pooled = np.maximum.reduceat(xs, starts, axis=0)
    out = Node(pooled, name)
    if not tape.recording:
        return tape.record(out, None, x)

    n, channels = xs.shape
    candidates = np.where(xs == pooled[ordered], np.arange(n)[:, None], n)
    winners = order[np.minimum.reduceat(candidates, starts, axis=0)]
    columns = np.broadcast_to(np.arange(channels), winners.shape)

    def backward(g):
        grad = np.zeros_like(x.value)
        grad[winners, columns] = g
        accumulate(x, grad)

    return tape.record(out, backward, x)


def segment_mean(tape, x, segments, count, name='mean_pool'):
    order, ordered, starts = _segments(segments, count)
    segments = np.asarray(segments, dtype=np.int64)
    if count == 0:
        return tape.record(Node(np.zeros((0, x.value.shape[1]), dtype=x.value.dtype), name), lambda g: None, x)
    sizes = np.bincount(segments, minlength=count).astype(x.value.dtype)
    pooled = np.add.reduceat(x.value[order], starts, axis=0) / sizes[:, None]
    out = Node(pooled.astype(x.value.dtype, copy=False), name)

    def backward(g):
        accumulate(x, g[segments] / sizes[segments][:, None])

    return tape.record(out, backward, x)


def sparse_conv(tape, x, rulebook, w, b=None, name='conv'):
    """Sparse convolution of a feature node along a prebuilt rulebook."""
    value = spconv.conv_features(x.value, rulebook, w.value, None if b is None else b.value)
    out = Node(value, name)

    def backward(g):
        grad_x, grad_w, grad_b = spconv.conv_backward(g, (x.value, rulebook, w.value))
        accumulate(x, grad_x)
        accumulate(w, grad_w)
        if b is not None:
            accumulate(b, grad_b)

    inputs = (x, w) if b is None else (x, w, b)
    return tape.record(out, backward, *inputs)


def mean_l2(tape, diff, weights=None, name='loss'):
    """Mean Euclidean row norm; the gradient at a zero row is zero.

    With `weights` (one per row, summing to 1) the mean becomes the
    weighted sum of row norms.
    """
    rows = diff.value.shape[0]
    if rows == 0:
        raise ContractViolation("mean over zero rows")
    if weights is None:
        weights = np.full(rows, 1.0 / rows)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (rows,):
        raise ContractViolation(f"expected {rows} row weights, got shape {weights.shape}")
    norms = np.sqrt((diff.value ** 2).sum(axis=1))
    out = Node(np.asarray((norms * weights).sum()), name)

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        unit = np.where((norms > 0)[:, None], diff.value / safe[:, None], 0.0)
        accumulate(diff, unit * (g * weights)[:, None])

    return tape.record(out, backward, diff)
