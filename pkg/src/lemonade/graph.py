"""Architecture graphs: structure, validation, counting, cell expansion, initial populations."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import layers as L
from .errors import GraphError, ShapeError

SS1 = "ss1"
SS2 = "ss2"


@dataclass
class Plan:
    order: list
    preds: dict
    succs: dict
    input_node: int
    output_node: int


@dataclass
class ArchGraph:
    """A DAG of layers. Treated as immutable once built; operators return new graphs.

    ``edges`` holds ``(src, dst, port)`` triples; ``port`` orders the inputs of joins.
    ``cell_tags`` maps node ids to ``"<instance>:<role>"`` for nodes that belong to a
    repeated cell.
    """

    nodes: dict
    edges: list
    input_spec: tuple
    num_classes: int
    cell_tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_spec = tuple(int(v) for v in self.input_spec)
        self.edges = [tuple(int(v) for v in e) for e in self.edges]

    @cached_property
    def plan(self) -> Plan:
        preds = {n: [] for n in self.nodes}
        succs = {n: [] for n in self.nodes}
        for src, dst, port in self.edges:
            if src not in self.nodes or dst not in self.nodes:
                raise GraphError(f"edge ({src}, {dst}) references an unknown node")
            preds[dst].append((port, src))
            succs[src].append(dst)
        preds = {n: [s for _, s in sorted(p)] for n, p in preds.items()}
        inputs = [n for n, k in self.nodes.items() if isinstance(k, L.Input)]
        heads = [n for n, k in self.nodes.items() if isinstance(k, L.SoftmaxHead)]
        if len(inputs) != 1 or len(heads) != 1:
            raise GraphError("graph needs exactly one input and one softmax head")
        position = {n: i for i, n in enumerate(self.nodes)}
        indeg = {n: len(p) for n, p in preds.items()}
        ready = sorted((n for n, d in indeg.items() if d == 0), key=position.get)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            fresh = []
            for s in succs[n]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    fresh.append(s)
            ready = sorted(ready + fresh, key=position.get)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return Plan(order, preds, succs, inputs[0], heads[0])

    @cached_property
    def executable(self) -> Plan:
        """The plan, once the softmax head is known to be the single sink every node feeds."""
        plan = self.plan
        if plan.succs[plan.output_node]:
            raise GraphError("softmax head has successors")
        if len(self.ancestors(plan.output_node)) != len(self.nodes) - 1:
            raise GraphError("some nodes do not reach the softmax head")
        return plan

    @cached_property
    def shapes(self) -> dict:
        """Per-example output shape of every node (raises ShapeError)."""
        plan = self.plan
        shapes = {}
        for n in plan.order:
            kind = self.nodes[n]
            if isinstance(kind, L.Input):
                shapes[n] = self.input_spec
            else:
                shapes[n] = L.output_shape(kind, [shapes[p] for p in plan.preds[n]], layer=n)
        return shapes

    def in_shapes(self, node):
        return [self.shapes[p] for p in self.plan.preds[node]]

    def preds(self, node):
        return self.plan.preds[node]

    def succs(self, node):
        return self.plan.succs[node]

    def next_id(self):
        return max(self.nodes) + 1

    def ancestors(self, node):
        seen, todo = set(), [node]
        while todo:
            for p in self.preds(todo.pop()):
                if p not in seen:
                    seen.add(p)
                    todo.append(p)
        return seen

    def descendants(self, node):
        seen, todo = set(), [node]
        while todo:
            for s in self.succs(todo.pop()):
                if s not in seen:
                    seen.add(s)
                    todo.append(s)
        return seen

    def conv_nodes(self):
        return [n for n, k in self.nodes.items() if isinstance(k, L.CONVS)]

    def structure_key(self):
        """Hashable description used for structural equality."""
        return (tuple((n, self.nodes[n]) for n in sorted(self.nodes)), tuple(sorted(self.edges)),
                self.input_spec, self.num_classes, tuple(sorted(self.cell_tags.items())))

    def __eq__(self, other):
        if not isinstance(other, ArchGraph):
            return NotImplemented
        return self.structure_key() == other.structure_key()

    __hash__ = None

    def copy(self):
        return ArchGraph(dict(self.nodes), list(self.edges), self.input_spec, self.num_classes,
                         dict(self.cell_tags))


# --------------------------------------------------------------------------- validation


@dataclass(frozen=True)
class SearchSpaceConstraint:
    min_convs: int = 3
    min_filters_per_conv: int = 4


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    node: int | None = None


def validate(graph: ArchGraph, constraint: SearchSpaceConstraint | None = None) -> list:
    """Return the list of violations; an empty list means the graph is valid."""
    out = []
    ids = set(graph.nodes)
    for src, dst, port in graph.edges:
        if src not in ids or dst not in ids:
            out.append(Violation("dangling_edge", f"edge ({src}, {dst}) has an unknown endpoint"))
    if out:
        return out
    inputs = [n for n, k in graph.nodes.items() if isinstance(k, L.Input)]
    heads = [n for n, k in graph.nodes.items() if isinstance(k, L.SoftmaxHead)]
    if len(inputs) != 1:
        out.append(Violation("input", f"expected one input node, found {len(inputs)}"))
    if len(heads) != 1:
        out.append(Violation("output", f"expected one softmax head, found {len(heads)}"))
    if out:
        return out

    indeg = {n: 0 for n in ids}
    ports = {n: [] for n in ids}
    for src, dst, port in graph.edges:
        indeg[dst] += 1
        ports[dst].append(port)
    for n, kind in graph.nodes.items():
        if isinstance(kind, L.Input):
            if indeg[n]:
                out.append(Violation("in_degree", "input node has incoming edges", n))
        elif isinstance(kind, L.JOINS):
            if indeg[n] < 2 or (isinstance(kind, L.AddJoin) and indeg[n] != 2):
                out.append(Violation("in_degree", f"join has {indeg[n]} inputs", n))
            elif sorted(ports[n]) != list(range(indeg[n])):
                out.append(Violation("ports", f"join ports {sorted(ports[n])} are not 0..k-1", n))
        elif indeg[n] != 1:
            out.append(Violation("in_degree", f"layer has {indeg[n]} inputs", n))
    try:
        plan = graph.plan
    except GraphError as exc:
        out.append(Violation("cycle", str(exc)))
        return out
    reach = graph.descendants(plan.input_node) | {plan.input_node}
    back = graph.ancestors(plan.output_node) | {plan.output_node}
    for n in graph.nodes:
        if n not in reach:
            out.append(Violation("unreachable", "node not reachable from input", n))
        elif n not in back:
            out.append(Violation("dead_end", "node does not reach the output", n))
    if graph.succs(plan.output_node):
        out.append(Violation("output", "softmax head has successors", plan.output_node))
    if out:
        return out
    try:
        shapes = graph.shapes
    except ShapeError as exc:
        out.append(Violation("shape", str(exc), exc.layer))
        return out
    if shapes[plan.output_node] != (graph.num_classes,):
        out.append(Violation("shape", f"head emits {shapes[plan.output_node]}, "
                                      f"expected ({graph.num_classes},)", plan.output_node))
    if constraint is not None:
        convs = graph.conv_nodes()
        if len(convs) < constraint.min_convs:
            out.append(Violation("min_convs", f"{len(convs)} convolutions < {constraint.min_convs}"))
        for n in convs:
            if graph.nodes[n].out_channels < constraint.min_filters_per_conv:
                out.append(Violation("min_filters", f"{graph.nodes[n].out_channels} filters "
                                                    f"< {constraint.min_filters_per_conv}", n))
    return out


def check(graph, constraint=None):
    problems = validate(graph, constraint)
    if problems:
        raise GraphError("; ".join(f"{v.code}: {v.message}" for v in problems))
    return graph


# --------------------------------------------------------------------------- counting


def count_params(graph: ArchGraph) -> int:
    total = 0
    for n, kind in graph.nodes.items():
        if isinstance(kind, L.Input):
            continue
        for shape in L.param_shapes(kind, graph.in_shapes(n)).values():
            total += int(np.prod(shape, dtype=np.int64))
    return total


def count_macs(graph: ArchGraph) -> int:
    """Multiply-adds per example over convolutions and dense layers."""
    total = 0
    for n, kind in graph.nodes.items():
        if isinstance(kind, L.Conv2d):
            cin = graph.in_shapes(n)[0][0]
            c, h, w = graph.shapes[n]
            total += h * w * c * kind.kernel ** 2 * cin
        elif isinstance(kind, L.SeparableConv2d):
            cin = graph.in_shapes(n)[0][0]
            c, h, w = graph.shapes[n]
            total += h * w * kind.kernel ** 2 * cin + h * w * cin * c
        elif isinstance(kind, L.Dense):
            total += graph.in_shapes(n)[0][0] * kind.out_units
    return total


def init_weights(graph: ArchGraph, rng, dtype=np.float64) -> dict:
    return {n: L.init_params(kind, graph.in_shapes(n), rng, dtype)
            for n, kind in graph.nodes.items()
            if not isinstance(kind, L.Input) and (L.param_shapes(kind, graph.in_shapes(n))
                                                  or L.state_shapes(kind, graph.in_shapes(n)))}


def copy_weights(weights):
    return {n: {k: v.copy() for k, v in d.items()} for n, d in weights.items()}


def weights_equal(a, b):
    if a.keys() != b.keys():
        return False
    for n in a:
        if a[n].keys() != b[n].keys():
            return False
        for k in a[n]:
            if a[n][k].shape != b[n][k].shape or a[n][k].tobytes() != b[n][k].tobytes():
                return False
    return True


# --------------------------------------------------------------------------- builders


class _Builder:
    def __init__(self, input_spec, num_classes):
        self.nodes = {0: L.Input()}
        self.edges = []
        self.tags = {}
        self.input_spec = input_spec
        self.num_classes = num_classes

    def add(self, kind, *srcs, tag=None):
        n = len(self.nodes)
        self.nodes[n] = kind
        for port, s in enumerate(srcs):
            self.edges.append((s, n, port))
        if tag is not None:
            self.tags[n] = tag
        return n

    def build(self):
        return ArchGraph(self.nodes, self.edges, self.input_spec, self.num_classes, self.tags)


def chain_net(widths, separable, input_spec=(1, 12, 12), num_classes=4, kernel=3, pools=None):
    """Conv-BatchNorm-ReLU blocks with max pooling between them, then GAP, dense and head."""
    b = _Builder(input_spec, num_classes)
    x = 0
    pools = len(widths) - 1 if pools is None else pools
    conv = L.SeparableConv2d if separable else L.Conv2d
    for i, c in enumerate(widths):
        x = b.add(conv(kernel=kernel, stride=1, out_channels=c), x)
        x = b.add(L.BatchNorm(), x)
        x = b.add(L.ReLU(), x)
        if i < pools:
            x = b.add(L.MaxPool(2, 2), x)
    x = b.add(L.GlobalAvgPool(), x)
    x = b.add(L.Dense(num_classes), x)
    b.add(L.SoftmaxHead(), x)
    return b.build()


@dataclass(frozen=True)
class MacroSpec:
    blocks: tuple = ((2, False), (2, True))
    stem_channels: int = 8
    last_block_filters: int = 16


@dataclass
class Cell:
    """A cell fragment. ``"in"`` names the cell input; channel counts are at last-block width.

    ``nodes`` maps role names to layer kinds; ``edges`` holds ``(src_role, dst_role, port)``.
    """

    nodes: dict
    edges: list
    output: str


def single_layer_cell(filters, separable):
    conv = L.SeparableConv2d if separable else L.Conv2d
    return Cell({"c": conv(3, 1, filters), "bn": L.BatchNorm(), "r": L.ReLU()},
                [("in", "c", 0), ("c", "bn", 0), ("bn", "r", 0)], output="r")


def _scaled(kind, factor, where):
    if not isinstance(kind, L.CONVS):
        return kind
    c = kind.out_channels * factor
    if c < 1 or c != int(c):
        raise GraphError(f"cell channel count {kind.out_channels} cannot be scaled by {factor} "
                         f"in {where}")
    return type(kind)(kind.kernel, kind.stride, int(c), kind.has_bias)


def expand_cell(cell: Cell, macro: MacroSpec, input_spec=(1, 12, 12), num_classes=4) -> ArchGraph:
    """Stack ``cell`` through the macro skeleton; every instance is tagged ``"<i>:<role>"``."""
    if not macro.blocks:
        raise GraphError("macro architecture needs at least one block")
    if macro.last_block_filters < 1 or macro.stem_channels < 1:
        raise GraphError("filter counts must be positive")
    b = _Builder(input_spec, num_classes)
    x = b.add(L.Conv2d(3, 1, macro.stem_channels), 0)
    x = b.add(L.BatchNorm(), x)
    x = b.add(L.ReLU(), x)
    downs_after = [sum(1 for _, d in macro.blocks[i + 1:] if d) for i in range(len(macro.blocks))]
    instance = 0
    for bi, (repeats, downsample) in enumerate(macro.blocks):
        if repeats < 1:
            raise GraphError(f"block {bi} has {repeats} repeats")
        if downsample:
            x = b.add(L.MaxPool(2, 2), x)
        factor = 0.5 ** downs_after[bi]
        for _ in range(repeats):
            ids = {"in": x}
            pending = dict(cell.nodes)
            # nodes in dependency order within the fragment
            while pending:
                progressed = False
                for role in list(pending):
                    srcs = sorted((p, s) for s, d, p in cell.edges if d == role)
                    if all(s in ids for _, s in srcs):
                        kind = _scaled(pending.pop(role), factor, f"block {bi}")
                        ids[role] = b.add(kind, *[ids[s] for _, s in srcs],
                                          tag=f"{instance}:{role}")
                        progressed = True
                if not progressed:
                    raise GraphError("cell fragment is cyclic or has dangling inputs")
            x = ids[cell.output]
            instance += 1
    x = b.add(L.GlobalAvgPool(), x)
    x = b.add(L.Dense(num_classes), x)
    b.add(L.SoftmaxHead(), x)
    g = b.build()
    try:
        g.shapes
    except ShapeError as exc:
        raise GraphError(f"channel mismatch while expanding cells: {exc}") from exc
    return g


def cell_instances(graph: ArchGraph) -> dict:
    """``{instance: {role: node_id}}`` from the graph's cell tags."""
    out = {}
    for n, tag in graph.cell_tags.items():
        inst, role = tag.split(":", 1)
        out.setdefault(int(inst), {})[role] = n
    return dict(sorted(out.items()))


def cell_signature(graph: ArchGraph, members: dict):
    """Channel-free structural description of one cell instance."""
    inv = {n: r for r, n in members.items()}
    kinds = []
    for role, n in sorted(members.items()):
        k = graph.nodes[n]
        desc = (type(k).__name__, getattr(k, "kernel", None), getattr(k, "stride", None))
        kinds.append((role, desc))
    edges = sorted((inv.get(s, "<ext>"), inv[d], p) for s, d, p in graph.edges if d in inv)
    return tuple(kinds), tuple(edges)


def init_trivial_population(space=SS1, seed=0, input_spec=(1, 12, 12), num_classes=4,
                            macro: MacroSpec | None = None):
    """The four trivial starting networks with freshly initialized weights.

    Search space I: three Conv-BN-ReLU blocks (two separable, two plain), ordered by
    parameter count. Search space II: single-layer cells (plain/separable x two widths)
    stacked through ``macro``.
    """
    if space == SS1:
        graphs = [chain_net((8, 16, 32), True, input_spec, num_classes),
                  chain_net((16, 32, 64), True, input_spec, num_classes),
                  chain_net((8, 16, 32), False, input_spec, num_classes),
                  chain_net((16, 32, 64), False, input_spec, num_classes)]
    elif space == SS2:
        macro = macro or MacroSpec()
        graphs = []
        for separable in (False, True):
            for f in (macro.last_block_filters, 2 * macro.last_block_filters):
                m = MacroSpec(macro.blocks, macro.stem_channels, f)
                graphs.append(expand_cell(single_layer_cell(f, separable), m, input_spec,
                                          num_classes))
    else:
        raise ValueError(f"unknown search space {space!r}")
    seeds = np.random.SeedSequence(seed).spawn(len(graphs))
    return [(g, init_weights(g, np.random.default_rng(s))) for g, s in zip(graphs, seeds)]
