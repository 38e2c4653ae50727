"""Architecture files: JSON documents checked against ``schemas/architecture.schema.json``."""

from __future__ import annotations

import base64
import binascii
import dataclasses
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import layers as L
from .errors import GraphError, ParseError, ShapeError
from .graph import ArchGraph

FORMAT_VERSION = 1


@lru_cache(maxsize=None)
def schema():
    text = resources.files("lemonade").joinpath("schemas/architecture.schema.json").read_text()
    return json.loads(text)


def encode_array(arr) -> dict:
    arr = np.asarray(arr, dtype="<f8", order="C")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(doc, where="array") -> np.ndarray:
    try:
        raw = base64.b64decode(doc["data"], validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ParseError(f"bad base64 payload: {exc}", where) from None
    shape = tuple(doc["shape"])
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise ParseError(f"payload holds {len(raw)} bytes, shape {shape} needs "
                         f"{8 * int(np.prod(shape, dtype=np.int64))}", where)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def to_document(graph: ArchGraph, weights=None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "input_spec": list(graph.input_spec),
        "num_classes": graph.num_classes,
        "nodes": [{"id": n, "kind": type(k).__name__, "fields": dataclasses.asdict(k)}
                  for n, k in graph.nodes.items()],
        "edges": [{"src": s, "dst": d, "port": p} for s, d, p in graph.edges],
        "cell_tags": [{"node": n, "tag": t} for n, t in sorted(graph.cell_tags.items())],
    }
    if weights is not None:
        doc["weights"] = {str(n): {name: encode_array(v) for name, v in sorted(p.items())}
                          for n, p in sorted(weights.items())}
    return doc


def dumps(graph: ArchGraph, weights=None, indent=None) -> str:
    return json.dumps(to_document(graph, weights), indent=indent, sort_keys=False)


def from_document(doc):
    """Build ``(graph, weights or None)`` from a decoded document; nothing partial escapes."""
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        where = "/" + "/".join(str(p) for p in exc.absolute_path)
        raise ParseError(f"schema violation: {exc.message}", where) from None
    nodes = {}
    for i, item in enumerate(doc["nodes"]):
        if item["id"] in nodes:
            raise ParseError(f"duplicate node id {item['id']}", f"/nodes/{i}")
        try:
            nodes[item["id"]] = L.KINDS[item["kind"]](**item["fields"])
        except TypeError as exc:
            raise ParseError(f"bad fields for {item['kind']}: {exc}", f"/nodes/{i}/fields") from None
    edges = [(e["src"], e["dst"], e["port"]) for e in doc["edges"]]
    tags = {t["node"]: t["tag"] for t in doc["cell_tags"]}
    graph = ArchGraph(nodes, edges, tuple(doc["input_spec"]), doc["num_classes"], tags)
    try:
        graph.shapes
    except (GraphError, ShapeError) as exc:
        raise ParseError(f"inconsistent graph: {exc}", "/edges") from None
    weights = None
    if "weights" in doc:
        weights = {}
        for key, params in doc["weights"].items():
            n = int(key)
            if n not in nodes:
                raise ParseError(f"weights for unknown node {n}", f"/weights/{key}")
            arrays = {name: decode_array(a, f"/weights/{key}/{name}")
                      for name, a in params.items()}
            ins = [] if n == graph.plan.input_node else graph.in_shapes(n)
            expected = {**L.param_shapes(nodes[n], ins), **L.state_shapes(nodes[n], ins)} if ins else {}
            got = {name: a.shape for name, a in arrays.items()}
            if got != {k: tuple(v) for k, v in expected.items()}:
                raise ParseError(f"weights of node {n} have shapes {got}, expected {expected}",
                                 f"/weights/{key}")
            weights[n] = arrays
    return graph, weights


def loads(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return from_document(doc)


def save(path, graph, weights=None):
    Path(path).write_text(dumps(graph, weights))


def load(path):
    return loads(Path(path).read_text())
