"""Whole-graph forward/backward passes and the softmax cross-entropy loss."""

from __future__ import annotations

import numpy as np

from . import layers as L
from .errors import NonFiniteError, ShapeError, TapeError


class Tape:
    """Holds per-layer caches of one forward pass so that a backward pass can follow."""

    def __init__(self):
        self.batch = None
        self.mode = None
        self.caches = {}

    def clear(self):
        self.batch = None
        self.caches = {}


def run_forward(graph, weights, batch, mode=L.INFER, tape: Tape | None = None, check=True):
    """Evaluate ``graph`` on ``batch`` in topological order and return the logits.

    In train mode BatchNorm updates the moving statistics stored in ``weights``.
    """
    plan = graph.executable
    c, h, w = graph.input_spec
    if batch.ndim != 4 or batch.shape[1:] != (c, h, w):
        raise ShapeError(plan.input_node, "batch does not match the input spec",
                         dims=(tuple(batch.shape), graph.input_spec))
    values = {}
    if tape is not None:
        tape.clear()
        tape.batch = batch
        tape.mode = mode
    for n in plan.order:
        kind = graph.nodes[n]
        if isinstance(kind, L.Input):
            values[n] = batch
            continue
        params = weights.get(n, {})
        out, cache = L.forward(kind, params, [values[p] for p in plan.preds[n]], mode, layer=n)
        if check and not np.isfinite(out).all():
            raise NonFiniteError(n)
        values[n] = out
        if tape is not None:
            tape.caches[n] = cache
    return values[plan.output_node]


def run_backward(graph, weights, batch, loss_grad, tape: Tape, input_grad=False):
    """Gradients of every learnable parameter, keyed like the weight store.

    ``tape`` must hold the forward pass of the same ``batch``.
    """
    if tape is None or tape.batch is None or not tape.caches:
        raise TapeError("run_backward called without a cached forward pass")
    if tape.batch is not batch and not (tape.batch.shape == batch.shape
                                        and np.array_equal(tape.batch, batch)):
        raise TapeError("cached forward pass belongs to a different batch")
    plan = graph.plan
    upstream = {plan.output_node: loss_grad}
    grads = {}
    for n in reversed(plan.order):
        kind = graph.nodes[n]
        g = upstream.pop(n, None)
        if isinstance(kind, L.Input):
            if input_grad:
                grads["input"] = g if g is not None else np.zeros_like(batch)
            continue
        params = weights.get(n, {})
        if g is None:
            # node does not influence the output through any differentiable path
            g_in = None
        else:
            g_in, pgrads = L.backward(kind, params, tape.caches[n], g)
            if pgrads:
                grads[n] = pgrads
        if g_in is None:
            continue
        for p, gp in zip(plan.preds[n], g_in):
            upstream[p] = upstream[p] + gp if p in upstream else gp
    for n, kind in graph.nodes.items():
        if n not in grads and n in weights:
            shapes = {k: v.shape for k, v in weights[n].items() if k in L.LEARNABLE}
            if shapes:
                grads[n] = {k: np.zeros(s) for k, s in shapes.items()}
    return grads


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _target_matrix(targets, n, k):
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n or not np.issubdtype(t.dtype, np.integer):
            raise ValueError("hard targets must be one integer class index per row")
        if (t < 0).any() or (t >= k).any():
            raise ValueError(f"class index out of range [0, {k})")
        onehot = np.zeros((n, k))
        onehot[np.arange(n), t] = 1.0
        return onehot
    if t.shape != (n, k):
        raise ValueError(f"soft targets must have shape {(n, k)}, got {t.shape}")
    if (t < 0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("soft target rows must be distributions")
    return t


def softmax_crossentropy(logits, targets):
    """Mean cross-entropy and its gradient with respect to the logits."""
    if np.isnan(logits).any():
        raise ValueError("logits contain NaN")
    n, k = logits.shape
    t = _target_matrix(targets, n, k)
    logp = log_softmax(logits)
    loss = float(-(t * logp).sum() / n)
    grad = (np.exp(logp) - t) / n
    return loss, grad
