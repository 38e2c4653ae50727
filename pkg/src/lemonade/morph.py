"""Mutation operators: function-preserving network morphisms and approximate morphisms.

Exact operators (``insert_conv_block``, ``widen_conv``, ``add_skip``) initialize the new
weights so the child computes the parent's function. Approximate operators
(``remove_layer``, ``prune_filters``, ``to_separable``) shrink the network, inherit all
unaffected weights and then fit the affected layers to the parent's soft outputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .engine import Tape, log_softmax, run_backward, run_forward
from .errors import GraphError, MorphError, NonFiniteError, ShapeError
from .graph import (SS1, SS2, ArchGraph, SearchSpaceConstraint, cell_instances, copy_weights,
                    validate)
from .objectives import predict, sgd_step

INSERT_CONV = "insert_conv"
WIDEN = "widen"
ADD_SKIP = "add_skip"
REMOVE = "remove_layer"
PRUNE = "prune_filters"
TO_SEPARABLE = "to_separable"

EXACT_OPS = (INSERT_CONV, WIDEN, ADD_SKIP)
APPROX_OPS = (REMOVE, PRUNE, TO_SEPARABLE)
ALL_OPS = EXACT_OPS + APPROX_OPS

MAX_RETRIES = 10


@dataclass(frozen=True)
class MorphismOp:
    kind: str
    site: tuple
    params: tuple = ()

    @property
    def is_exact(self):
        return self.kind in EXACT_OPS

    def as_record(self):
        return {"kind": self.kind, "site": list(self.site), "params": dict(self.params)}


@dataclass(frozen=True)
class RepairConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    n_examples: int = 256

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid repair config {self}")


@dataclass
class MutationOutcome:
    op: MorphismOp
    child_graph: ArchGraph
    child_weights: dict
    affected_nodes: set = field(default_factory=set)
    delta_before: float = 0.0
    delta_after: float = 0.0
    new_nodes: list = field(default_factory=list)

    @property
    def is_exact(self):
        return self.op.is_exact

    def as_record(self):
        rec = self.op.as_record()
        rec.update(delta_before=self.delta_before, delta_after=self.delta_after)
        return rec


# --------------------------------------------------------------------------- helpers


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape)


def _rebuild(graph, nodes, edges, after=None, new=()):
    """New graph; ``new`` node ids are placed right after ``after`` in node order."""
    if after is not None and new:
        ordered = {}
        for n, k in nodes.items():
            if n in new:
                continue
            ordered[n] = k
            if n == after:
                for m in new:
                    ordered[m] = nodes[m]
        nodes = ordered
    tags = {n: t for n, t in graph.cell_tags.items() if n in nodes}
    return ArchGraph(nodes, edges, graph.input_spec, graph.num_classes, tags)


def _redirect_outputs(edges, old_src, new_src):
    return [(new_src if s == old_src else s, d, p) for s, d, p in edges]


def _take(arr, imap, axis, fill):
    """Reindex ``arr`` along ``axis``: entry j comes from old index imap[j], or ``fill(shape)``."""
    parts = []
    for j in imap:
        if j is None:
            shape = list(arr.shape)
            shape[axis] = 1
            parts.append(fill(tuple(shape)))
        else:
            parts.append(np.take(arr, [j], axis=axis))
    return np.concatenate(parts, axis=axis)


def _reindex_consumers(graph, weights, start, imap, old_c, rng, touched):
    """Adapt everything downstream of ``start`` whose weights depend on its channel layout.

    ``imap[j]`` is the old channel feeding new channel ``j`` (``None`` for a new channel)
    and ``old_c`` the old channel count. Channel maps flow through channel-agnostic
    layers, BatchNorm and concatenations; convolution and dense consumers are reindexed
    with zero weights on new channels, which leaves their output unchanged.
    """
    try:
        graph.shapes
    except (ShapeError, GraphError) as exc:
        raise MorphError("shape", f"channel change breaks the graph: {exc}") from None
    maps = {start: (list(imap), old_c)}
    for n in graph.plan.order:
        preds = graph.preds(n)
        if n == start or not any(p in maps for p in preds):
            continue
        kind = graph.nodes[n]
        if isinstance(kind, L.ConcatJoin):
            join_map, offset = [], 0
            for p in preds:
                im, oc = maps.get(p, (None, graph.shapes[p][0]))
                join_map += list(range(offset, offset + oc)) if im is None else \
                    [None if j is None else offset + j for j in im]
                offset += oc
            maps[n] = (join_map, offset)
            continue
        if isinstance(kind, L.AddJoin):
            if all(p in maps for p in preds) and all(maps[p] == maps[preds[0]] for p in preds):
                maps[n] = maps[preds[0]]
                continue
            raise MorphError("shape", f"channel change cannot pass add join {n}")
        im, oc = maps[preds[0]]
        if isinstance(kind, L.BatchNorm):
            p = weights[n]
            eps = kind.epsilon
            weights[n] = {
                "mean": _take(p["mean"], im, 0, np.zeros),
                "var": _take(p["var"], im, 0, np.ones),
                "scale": _take(p["scale"], im, 0, lambda sh: np.full(sh, np.sqrt(1.0 + eps))),
                "shift": _take(p["shift"], im, 0, np.zeros),
            }
            touched.add(n)
            maps[n] = (im, oc)
        elif isinstance(kind, (L.ReLU, L.MaxPool, L.GlobalAvgPool)):
            maps[n] = (im, oc)
        elif isinstance(kind, (L.Conv2d, L.Dense)):
            p = dict(weights[n])
            p["w"] = _take(p["w"], im, 1, np.zeros)
            weights[n] = p
            touched.add(n)
        elif isinstance(kind, L.SeparableConv2d):
            p = dict(weights[n])
            k = kind.kernel
            p["dw"] = _take(p["dw"], im, 0, lambda sh: _he(rng, sh, k * k))
            p["pw"] = _take(p["pw"], im, 1, np.zeros)
            weights[n] = p
            touched.add(n)
        else:
            raise MorphError("shape", f"channel change cannot propagate through "
                                      f"{type(kind).__name__} node {n}")


def _nearest_weighted(graph, node, direction):
    """Closest weighted layers from ``node`` (exclusive), walking through weightless ones."""
    step = graph.preds if direction == "up" else graph.succs
    out, todo, seen = set(), list(step(node)), set()
    while todo:
        n = todo.pop()
        if n in seen:
            continue
        seen.add(n)
        if L.is_weighted(graph.nodes[n]):
            out.add(n)
        elif not isinstance(graph.nodes[n], (L.Input, L.SoftmaxHead)):
            todo.extend(step(n))
    return out


def _finish(graph, weights, constraint=None):
    problems = validate(graph, constraint)
    if problems:
        codes = {v.code for v in problems}
        code = "constraint" if codes & {"min_convs", "min_filters"} else "invalid"
        raise MorphError(code, "; ".join(f"{v.code}: {v.message}" for v in problems))
    for n, kind in graph.nodes.items():
        if isinstance(kind, L.Input):
            continue
        for name, shape in L.param_shapes(kind, graph.in_shapes(n)).items():
            if weights[n][name].shape != tuple(shape):
                raise AssertionError(f"weight {n}.{name} has shape {weights[n][name].shape}, "
                                     f"graph expects {shape}")
    return graph


def _is_post_relu(graph, site):
    kind = graph.nodes[site]
    # image inputs are in [0, 1], so ReLU is the identity on them as well
    return isinstance(kind, (L.ReLU, L.Input))


# --------------------------------------------------------------------------- exact operators


def insert_conv_block(graph, weights, site, rng=None, out_channels=None, data=None):
    """Insert an identity-initialized Conv(3x3)-BatchNorm-ReLU block after ``site``.

    ``site`` must emit post-ReLU activations, so the trailing ReLU is idempotent. If
    ``data`` (images) is given, the new BatchNorm's moving statistics are set to the
    activation statistics at ``site`` on that data; scale and shift cancel them either way.
    """
    if site not in graph.nodes:
        raise MorphError("precondition", f"unknown node {site}")
    if not _is_post_relu(graph, site):
        raise MorphError("precondition", f"node {site} ({type(graph.nodes[site]).__name__}) "
                                         "is not a ReLU output")
    shape = graph.shapes[site]
    if len(shape) != 3:
        raise MorphError("shape", f"node {site} does not emit feature maps")
    c = shape[0]
    if out_channels is not None and out_channels != c:
        raise MorphError("precondition", f"identity block needs {c} channels, got {out_channels}")
    conv_id = graph.next_id()
    bn_id, relu_id = conv_id + 1, conv_id + 2
    nodes = dict(graph.nodes)
    nodes[conv_id] = L.Conv2d(3, 1, c, True)
    nodes[bn_id] = L.BatchNorm()
    nodes[relu_id] = L.ReLU()
    edges = _redirect_outputs(graph.edges, site, relu_id)
    edges += [(site, conv_id, 0), (conv_id, bn_id, 0), (bn_id, relu_id, 0)]
    child = _rebuild(graph, nodes, edges, after=site, new=(conv_id, bn_id, relu_id))

    w = copy_weights(weights)
    kernel = np.zeros((c, c, 3, 3))
    kernel[np.arange(c), np.arange(c), 1, 1] = 1.0
    w[conv_id] = {"w": kernel, "b": np.zeros(c)}
    if data is not None and len(data):
        acts = _activations(graph, weights, data, site)
        mean, var = acts.mean(axis=(0, 2, 3)), acts.var(axis=(0, 2, 3))
    else:
        mean, var = np.zeros(c), np.ones(c)
    eps = nodes[bn_id].epsilon
    w[bn_id] = {"mean": mean.copy(), "var": var.copy(),
                "scale": np.sqrt(var + eps), "shift": mean.copy()}
    _finish(child, w)
    op = MorphismOp(INSERT_CONV, (site,))
    return MutationOutcome(op, child, w, {conv_id, bn_id}, 0.0, 0.0, [conv_id, bn_id, relu_id])


def _activations(graph, weights, images, node):
    """Inference-mode output of ``node``, evaluating only its ancestors."""
    keep = graph.ancestors(node) | {node}
    vals = {}
    for n in graph.plan.order:
        if n not in keep:
            continue
        kind = graph.nodes[n]
        if isinstance(kind, L.Input):
            vals[n] = images
        else:
            ins = [vals[p] for p in graph.preds(n)]
            vals[n] = L.forward(kind, weights.get(n, {}), ins, L.INFER, n)[0]
    return vals[node]


def widen_conv(graph, weights, site, rng=None, factor=2):
    """Double the filters of a convolution; consumers see the new channels with zero weights."""
    rng = rng if rng is not None else np.random.default_rng(0)
    kind = graph.nodes.get(site)
    if not isinstance(kind, L.CONVS):
        raise MorphError("precondition", f"node {site} is not a convolution")
    if factor != 2:
        raise MorphError("precondition", "only factor 2 is supported")
    c = kind.out_channels
    nodes = dict(graph.nodes)
    nodes[site] = type(kind)(kind.kernel, kind.stride, c * factor, kind.has_bias)
    child = _rebuild(graph, nodes, list(graph.edges))
    w = copy_weights(weights)
    p = dict(w[site])
    extra = c * (factor - 1)
    if isinstance(kind, L.Conv2d):
        old = p["w"]
        fan_in = old.shape[1] * old.shape[2] * old.shape[3]
        p["w"] = np.concatenate([old, _he(rng, (extra,) + old.shape[1:], fan_in)])
    else:
        old = p["pw"]
        p["pw"] = np.concatenate([old, _he(rng, (extra,) + old.shape[1:], old.shape[1])])
    if kind.has_bias:
        p["b"] = np.concatenate([p["b"], np.zeros(extra)])
    w[site] = p
    touched = set()
    _reindex_consumers(child, w, site, list(range(c)) + [None] * extra, c, rng, touched)
    _finish(child, w)
    return MutationOutcome(MorphismOp(WIDEN, (site,), (("factor", factor),)), child, w,
                           {site} | touched)


def add_skip(graph, weights, src, dst, mode="add", rng=None):
    """Join the output of ``src`` into the output of ``dst``.

    ``add``: ``(1 - lam) * dst + lam * src`` with ``lam = 0``. ``concat``: channels of
    ``src`` appended, consumers get zero weights on them.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if mode not in ("add", "concat"):
        raise MorphError("precondition", f"unknown skip mode {mode!r}")
    for n in (src, dst):
        if n not in graph.nodes:
            raise MorphError("precondition", f"unknown node {n}")
    if src == dst:
        raise MorphError("precondition", "skip needs two distinct nodes")
    if isinstance(graph.nodes[dst], (L.Input, L.SoftmaxHead)):
        raise MorphError("precondition", f"cannot join into node {dst}")
    if src in graph.descendants(dst):
        raise MorphError("cycle", f"node {src} is downstream of {dst}")
    s_shape, d_shape = graph.shapes[src], graph.shapes[dst]
    if len(s_shape) != 3 or len(d_shape) != 3 or s_shape[1:] != d_shape[1:]:
        raise MorphError("shape", f"spatial shapes {s_shape} and {d_shape} do not match")
    if mode == "add" and s_shape != d_shape:
        raise MorphError("shape", f"add skip needs equal shapes, got {s_shape} and {d_shape}")
    j = graph.next_id()
    nodes = dict(graph.nodes)
    nodes[j] = L.AddJoin() if mode == "add" else L.ConcatJoin()
    edges = _redirect_outputs(graph.edges, dst, j) + [(dst, j, 0), (src, j, 1)]
    child = _rebuild(graph, nodes, edges, after=dst, new=(j,))
    w = copy_weights(weights)
    touched = set()
    if mode == "add":
        w[j] = {"lam": np.zeros(())}
        touched.add(j)
    else:
        cd, cs = d_shape[0], s_shape[0]
        _reindex_consumers(child, w, j, list(range(cd)) + [None] * cs, cd, rng, touched)
    _finish(child, w)
    return MutationOutcome(MorphismOp(ADD_SKIP, (src, dst), (("mode", mode),)), child, w,
                           touched, new_nodes=[j])


# --------------------------------------------------------------------------- approximate ops


def _remove_struct(graph, weights, site, constraint, rng):
    kind = graph.nodes.get(site)
    if kind is None:
        raise MorphError("precondition", f"unknown node {site}")
    w = copy_weights(weights)
    touched = set()
    if isinstance(kind, L.JOINS):
        keep = graph.preds(site)[0]
        nodes = {n: k for n, k in graph.nodes.items() if n != site}
        edges = [e for e in graph.edges if e[1] != site]
        edges = _redirect_outputs(edges, site, keep)
        child = _rebuild(graph, nodes, edges)
        w.pop(site, None)
        if isinstance(kind, L.ConcatJoin):
            c_keep = graph.shapes[keep][0]
            _reindex_consumers(child, w, keep, list(range(c_keep)), graph.shapes[site][0], rng,
                               touched)
        upstream, tail = keep, keep
    elif isinstance(kind, (L.CONVS, L.MaxPool)):
        block = [site]
        if isinstance(kind, L.CONVS):
            for follow in (L.BatchNorm, L.ReLU):
                succ = graph.succs(block[-1])
                if len(succ) == 1 and isinstance(graph.nodes[succ[0]], follow):
                    block.append(succ[0])
                else:
                    break
            if constraint is not None and len(graph.conv_nodes()) - 1 < constraint.min_convs:
                raise MorphError("constraint", f"removing node {site} leaves fewer than "
                                               f"{constraint.min_convs} convolutions")
        upstream = graph.preds(site)[0]
        nodes = {n: k for n, k in graph.nodes.items() if n not in block}
        edges = [e for e in graph.edges if e[0] not in block[:-1] and e[1] not in block]
        edges = _redirect_outputs(edges, block[-1], upstream)
        child = _rebuild(graph, nodes, edges)
        for b in block:
            w.pop(b, None)
        c_in, c_out = graph.shapes[upstream][0], graph.shapes[block[-1]][0]
        if c_in != c_out:
            imap = [j if j < c_out else None for j in range(c_in)]
            _reindex_consumers(child, w, upstream, imap, c_out, rng, touched)
        tail = upstream
    else:
        raise MorphError("precondition", f"node {site} ({type(kind).__name__}) is not removable")
    if not child.succs(tail) and tail != child.plan.output_node:
        raise MorphError("invalid", "removal disconnects the graph")
    _finish(child, w, constraint)
    affected = (touched | _nearest_weighted(child, upstream, "up")
                | _nearest_weighted(child, tail, "down"))
    if L.is_weighted(child.nodes[upstream]):
        affected.add(upstream)
    return child, w, affected


def _prune_struct(graph, weights, site, keep_fraction, constraint, rng):
    kind = graph.nodes.get(site)
    if not isinstance(kind, L.CONVS):
        raise MorphError("precondition", f"node {site} is not a convolution")
    c = kind.out_channels
    if c < 4:
        raise MorphError("precondition", f"node {site} has only {c} filters")
    n_keep = int(round(c * keep_fraction))
    floor = constraint.min_filters_per_conv if constraint is not None else 1
    if n_keep < max(floor, 1) or n_keep >= c:
        raise MorphError("constraint", f"pruning {c} filters to {n_keep} is not allowed")
    w = copy_weights(weights)
    p = dict(w[site])
    rows = p["w"] if isinstance(kind, L.Conv2d) else p["pw"]
    norms = np.sqrt((rows.reshape(c, -1) ** 2).sum(axis=1))
    # drop the smallest-norm filters; ties keep the lower index
    keep = np.sort(np.argsort(-norms, kind="stable")[:n_keep])
    key = "w" if isinstance(kind, L.Conv2d) else "pw"
    p[key] = p[key][keep]
    if kind.has_bias:
        p["b"] = p["b"][keep]
    w[site] = p
    nodes = dict(graph.nodes)
    nodes[site] = type(kind)(kind.kernel, kind.stride, n_keep, kind.has_bias)
    child = _rebuild(graph, nodes, list(graph.edges))
    touched = set()
    _reindex_consumers(child, w, site, [int(i) for i in keep], c, rng, touched)
    _finish(child, w, constraint)
    return child, w, {site} | touched


def _separable_struct(graph, weights, site, constraint, rng):
    kind = graph.nodes.get(site)
    if not isinstance(kind, L.Conv2d):
        raise MorphError("precondition", f"node {site} is not a plain convolution")
    if kind.kernel <= 1:
        raise MorphError("precondition", f"node {site} is a 1x1 convolution")
    nodes = dict(graph.nodes)
    nodes[site] = L.SeparableConv2d(kind.kernel, kind.stride, kind.out_channels, kind.has_bias)
    child = _rebuild(graph, nodes, list(graph.edges))
    w = copy_weights(weights)
    old = w[site]
    k, mid = kind.kernel, kind.kernel // 2
    cin = old["w"].shape[1]
    dw = np.zeros((cin, 1, k, k))
    dw[:, 0, mid, mid] = 1.0
    new = {"dw": dw, "pw": old["w"][:, :, mid:mid + 1, mid:mid + 1].copy()}
    if kind.has_bias:
        new["b"] = old["b"].copy()
    w[site] = new
    _finish(child, w, constraint)
    return child, w, {site} | _nearest_weighted(child, site, "down")


def remove_layer(graph, weights, site, repair=None, data=None, constraint=None, rng=None):
    """Remove a convolution block (conv plus trailing BN/ReLU), a max-pool or a skip join."""
    rng = rng if rng is not None else np.random.default_rng(0)
    child, w, affected = _remove_struct(graph, weights, site, constraint, rng)
    return _repaired(MorphismOp(REMOVE, (site,)), graph, weights, child, w, affected, repair, data)


def prune_filters(graph, weights, site, keep_fraction=0.5, repair=None, data=None,
                  constraint=None, rng=None):
    """Keep the largest-L2-norm ``keep_fraction`` of a convolution's filters."""
    rng = rng if rng is not None else np.random.default_rng(0)
    child, w, affected = _prune_struct(graph, weights, site, keep_fraction, constraint, rng)
    op = MorphismOp(PRUNE, (site,), (("keep_fraction", keep_fraction),))
    return _repaired(op, graph, weights, child, w, affected, repair, data)


def to_separable(graph, weights, site, repair=None, data=None, constraint=None, rng=None):
    """Replace a plain k x k convolution by a depthwise-separable one.

    Starts from a pass-through depthwise kernel and the centre tap of the old kernel as
    pointwise weights, then relies on the repair step.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    child, w, affected = _separable_struct(graph, weights, site, constraint, rng)
    return _repaired(MorphismOp(TO_SEPARABLE, (site,)), graph, weights, child, w, affected,
                     repair, data)


def _repaired(op, graph, weights, child, w, affected, repair, data):
    out = MutationOutcome(op, child, w, set(affected))
    if repair is None:
        out.delta_before = out.delta_after = float("nan")
        return out
    w2, before, after = repair_distill(graph, weights, child, w, affected, repair, data)
    out.child_weights, out.delta_before, out.delta_after = w2, before, after
    return out


# --------------------------------------------------------------------------- distillation


def _kl_and_grad(child_logits, parent_probs, parent_logp):
    logq = log_softmax(child_logits)
    n = len(child_logits)
    kl = float((parent_probs * (parent_logp - logq)).sum() / n)
    return kl, (np.exp(logq) - parent_probs) / n


def distill_distance(graph, weights, images, parent_probs, parent_logp, batch_size=500):
    """Mean KL(parent || child): the cross-entropy to the parent's soft outputs minus
    the parent's own entropy, so it is zero exactly when the outputs agree."""
    total = 0.0
    for i in range(0, len(images), batch_size):
        logits = run_forward(graph, weights, images[i:i + batch_size], L.INFER)
        kl, _ = _kl_and_grad(logits, parent_probs[i:i + batch_size], parent_logp[i:i + batch_size])
        total += kl * len(logits)
    return total / len(images)


def repair_distill(parent_graph, parent_weights, child_graph, child_weights, affected,
                   repair: RepairConfig, images):
    """Fit the affected layers of the child to the parent's soft outputs.

    Everything outside ``affected`` stays frozen; the network runs in inference mode so
    frozen BatchNorm statistics are untouched too. Returns ``(weights, delta_before,
    delta_after)``; the weights with the lowest distance seen (including the starting
    point) are kept, so ``delta_after <= delta_before``.
    """
    if images is None or len(images) == 0:
        raise ValueError("repair needs data")
    affected = {n for n in affected if n in child_weights}
    if not affected:
        raise ValueError("repair needs a non-empty affected set")
    parent_logits = predict(parent_graph, parent_weights, images)
    parent_logp = log_softmax(parent_logits)
    parent_probs = np.exp(parent_logp)
    w = copy_weights(child_weights)
    before = distill_distance(child_graph, w, images, parent_probs, parent_logp)
    best, best_w = before, w
    if before <= 1e-12:
        return best_w, before, before
    tape = Tape()
    n = len(images)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(repair.epochs):
            w = copy_weights(best_w) if w is best_w else w
            try:
                for i in range(0, n, repair.batch_size):
                    x = images[i:i + repair.batch_size]
                    logits = run_forward(child_graph, w, x, L.INFER, tape)
                    _, g = _kl_and_grad(logits, parent_probs[i:i + repair.batch_size],
                                        parent_logp[i:i + repair.batch_size])
                    grads = run_backward(child_graph, w, x, g, tape)
                    sgd_step(w, grads, repair.learning_rate, nodes=affected)
                d = distill_distance(child_graph, w, images, parent_probs, parent_logp)
            except NonFiniteError:
                # diverged: the best snapshot so far stands
                break
            if not np.isfinite(d):
                break
            if d < best:
                best, best_w = d, w
                w = copy_weights(w)
    return best_w, before, best


# --------------------------------------------------------------------------- child generation


@dataclass
class Child:
    graph: ArchGraph
    weights: dict
    outcomes: list

    @property
    def operators(self):
        return [o.op.kind for o in self.outcomes]


def _candidates(graph, op, constraint, allowed, rng):
    shapes = graph.shapes
    nodes = [n for n in graph.plan.order if n in allowed]
    min_f = constraint.min_filters_per_conv if constraint else 1
    if op == INSERT_CONV:
        return [((n,), ()) for n in nodes if isinstance(graph.nodes[n], L.ReLU)
                and len(shapes[n]) == 3]
    if op == WIDEN:
        return [((n,), ()) for n in nodes if isinstance(graph.nodes[n], L.CONVS)]
    if op == ADD_SKIP:
        mode = "add" if rng.random() < 0.5 else "concat"
        out = []
        for d in nodes:
            if not isinstance(graph.nodes[d], (L.ReLU, L.JOINS)) or len(shapes[d]) != 3:
                continue
            anc = graph.ancestors(d)
            for s in graph.plan.order:
                if s not in allowed or s not in anc:
                    continue
                if isinstance(graph.nodes[s], L.Input) or len(shapes[s]) != 3:
                    continue
                if s in graph.preds(d):
                    continue
                ok = shapes[s] == shapes[d] if mode == "add" else shapes[s][1:] == shapes[d][1:]
                if ok:
                    out.append(((s, d), (("mode", mode),)))
        return out
    if op == REMOVE:
        n_conv = len(graph.conv_nodes())
        floor = constraint.min_convs if constraint else 0
        return [((n,), ()) for n in nodes
                if (isinstance(graph.nodes[n], L.CONVS) and n_conv > floor)
                or isinstance(graph.nodes[n], (L.MaxPool, L.JOINS))]
    if op == PRUNE:
        frac = 0.5 if rng.random() < 0.5 else 0.75
        return [((n,), (("keep_fraction", frac),)) for n in nodes
                if isinstance(graph.nodes[n], L.CONVS) and graph.nodes[n].out_channels >= 4
                and min_f <= int(round(graph.nodes[n].out_channels * frac))
                < graph.nodes[n].out_channels]
    if op == TO_SEPARABLE:
        return [((n,), ()) for n in nodes if isinstance(graph.nodes[n], L.Conv2d)
                and graph.nodes[n].kernel > 1]
    raise ValueError(f"unknown operator {op!r}")


def _apply_struct(graph, weights, op, site, params, constraint, rng, data):
    """Apply one operator without repair; returns ``(graph, weights, affected, new_nodes)``."""
    params = dict(params)
    if op == INSERT_CONV:
        out = insert_conv_block(graph, weights, site[0], rng, data=data)
    elif op == WIDEN:
        out = widen_conv(graph, weights, site[0], rng)
    elif op == ADD_SKIP:
        out = add_skip(graph, weights, site[0], site[1], params["mode"], rng)
    elif op == REMOVE:
        g, w, a = _remove_struct(graph, weights, site[0], constraint, rng)
        return g, w, a, []
    elif op == PRUNE:
        g, w, a = _prune_struct(graph, weights, site[0], params["keep_fraction"], constraint, rng)
        return g, w, a, []
    elif op == TO_SEPARABLE:
        g, w, a = _separable_struct(graph, weights, site[0], constraint, rng)
        return g, w, a, []
    else:
        raise ValueError(f"unknown operator {op!r}")
    _finish(out.child_graph, out.child_weights, constraint)
    return out.child_graph, out.child_weights, out.affected_nodes, out.new_nodes


def _next_role_base(roles):
    nums = [int(m.group(1)) for r in roles if (m := re.fullmatch(r"m(\d+)(?:\.\d+)?", r))]
    return f"m{max(nums, default=0) + 1}"


def _apply_everywhere(graph, weights, op, roles, params, constraint, rng, data):
    """Apply ``op`` at the same cell role(s) in every cell instance."""
    instances = cell_instances(graph)
    base = _next_role_base(instances[min(instances)].keys())
    g, w, affected = graph, weights, set()
    for inst in instances:
        members = cell_instances(g)[inst]
        site = tuple(members[r] for r in roles)
        g, w, a, new = _apply_struct(g, w, op, site, params, constraint, rng, data)
        tags = dict(g.cell_tags)
        for i, n in enumerate(new):
            tags[n] = f"{inst}:{base}.{i}"
        g = ArchGraph(g.nodes, g.edges, g.input_spec, g.num_classes, tags)
        affected |= a
    return g, w, {n for n in affected if n in g.nodes}


def _one_step(graph, weights, space, ops, rng, constraint, repair, data):
    for _ in range(MAX_RETRIES):
        op = ops[int(rng.integers(len(ops)))]
        if space == SS2:
            instances = cell_instances(graph)
            first = instances[min(instances)]
            allowed = set(first.values())
            cands = _candidates(graph, op, constraint, allowed, rng)
            if op == REMOVE:
                convs = [n for n in first.values() if isinstance(graph.nodes[n], L.CONVS)]
                cands = [c for c in cands if not (isinstance(graph.nodes[c[0][0]], L.CONVS)
                                                  and len(convs) < 2)]
        else:
            cands = _candidates(graph, op, constraint, set(graph.nodes), rng)
        if not cands:
            continue
        site, params = cands[int(rng.integers(len(cands)))]
        try:
            if space == SS2:
                inv = {n: t.split(":", 1)[1] for n, t in graph.cell_tags.items()}
                roles = tuple(inv[n] for n in site)
                g, w, affected = _apply_everywhere(graph, weights, op, roles, params, constraint,
                                                   rng, data)
            else:
                g, w, affected, new = _apply_struct(graph, weights, op, site, params,
                                                    constraint, rng, data)
        except MorphError:
            continue
        outcome = MutationOutcome(MorphismOp(op, site, tuple(params)), g, w, set(affected))
        if op in APPROX_OPS:
            if repair is not None:
                w2, before, after = repair_distill(graph, weights, g, w, affected, repair, data)
                outcome.child_weights, outcome.delta_before, outcome.delta_after = w2, before, after
            else:
                outcome.delta_before = outcome.delta_after = float("nan")
        return outcome
    raise MorphError("exhausted", f"no applicable operator after {MAX_RETRIES} attempts")


def generate_child(graph, weights, space=SS1, enabled_ops=ALL_OPS, rng=None,
                   constraint: SearchSpaceConstraint | None = None,
                   repair: RepairConfig | None = None, data=None, n_ops=None) -> Child:
    """Mutate a parent into a child.

    Search space I applies 1-3 uniformly drawn operators in sequence; search space II a
    single operator replicated across every cell instance. ``repair=None`` skips
    distillation (used when weights are re-initialized anyway).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ops = [op for op in ALL_OPS if op in set(enabled_ops)]
    if not ops:
        raise ValueError("no operators enabled")
    if n_ops is None:
        n_ops = int(rng.integers(1, 4)) if space == SS1 else 1
    g, w = graph, weights
    outcomes = []
    for _ in range(n_ops):
        out = _one_step(g, w, space, ops, rng, constraint, repair, data)
        outcomes.append(out)
        g, w = out.child_graph, out.child_weights
    _finish(g, w, constraint)
    return Child(g, w, outcomes)
