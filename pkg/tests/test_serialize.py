import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lemonade.errors import ParseError
from lemonade.graph import init_trivial_population, weights_equal
from lemonade.morph import add_skip, to_separable
from lemonade.serialize import dumps, load, loads, save, schema


def test_trivial_net_round_trip():
    for graph, weights in init_trivial_population("ss1", seed=0):
        g2, w2 = loads(dumps(graph, weights))
        assert g2 == graph
        assert list(g2.nodes) == list(graph.nodes)
        assert weights_equal(w2, weights)


def test_concat_skip_and_separable_round_trip(tmp_path):
    graph, weights = init_trivial_population("ss1", seed=0)[3]
    out = add_skip(graph, weights, 4, 7, "concat")
    out = to_separable(out.child_graph, out.child_weights, 5)
    save(tmp_path / "a.json", out.child_graph, out.child_weights)
    g2, w2 = load(tmp_path / "a.json")
    assert g2 == out.child_graph and weights_equal(w2, out.child_weights)


def test_add_skip_scalar_weight_round_trip():
    graph, weights = init_trivial_population("ss1", seed=0)[3]
    out = add_skip(graph, weights, 2, 3, "add")
    g2, w2 = loads(dumps(out.child_graph, out.child_weights))
    lam = [p["lam"] for p in w2.values() if "lam" in p]
    assert lam and all(v.shape == () for v in lam)
    assert weights_equal(w2, out.child_weights)


def test_cell_tags_round_trip():
    graph, _ = init_trivial_population("ss2", seed=0)[1]
    g2, w2 = loads(dumps(graph))
    assert g2.cell_tags == graph.cell_tags and w2 is None


@given(st.lists(st.floats(allow_nan=False, allow_infinity=True, width=64), min_size=1, max_size=20))
def test_weights_bit_exact(values):
    graph, weights = init_trivial_population("ss1", seed=0)[0]
    dense = max(n for n in weights if "w" in weights[n] and weights[n]["w"].ndim == 2)
    flat = weights[dense]["w"].ravel()
    flat[:len(values)] = values[:flat.size]
    _, w2 = loads(dumps(graph, weights))
    assert w2[dense]["w"].tobytes() == weights[dense]["w"].tobytes()


def test_document_matches_schema_fields():
    graph, weights = init_trivial_population("ss1", seed=0)[0]
    doc = json.loads(dumps(graph, weights))
    assert set(doc) <= set(schema()["properties"])
    assert {"format_version", "input_spec", "num_classes", "nodes", "edges", "cell_tags",
            "weights"} == set(doc)


def test_truncated_file_is_a_parse_error():
    graph, weights = init_trivial_population("ss1", seed=0)[0]
    text = dumps(graph, weights)
    for cut in (1, len(text) // 3, len(text) - 2):
        with pytest.raises(ParseError) as info:
            loads(text[:cut])
        assert info.value.position is not None


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(format_version=2),
    lambda d: d["nodes"][1].update(kind="Conv3d"),
    lambda d: d["nodes"][1]["fields"].update(dilation=2),
    lambda d: d.update(extra=1),
    lambda d: d["edges"].append({"src": 1, "dst": 99, "port": 0}),
    lambda d: d["weights"]["1"]["dw"].update(data="@@@"),
    lambda d: d["weights"]["1"]["dw"].update(shape=[3, 3]),
    lambda d: d["nodes"].append(dict(d["nodes"][0])),
])
def test_malformed_documents(mutate):
    graph, weights = init_trivial_population("ss1", seed=0)[0]
    doc = json.loads(dumps(graph, weights))
    mutate(doc)
    with pytest.raises(ParseError):
        loads(json.dumps(doc))


def test_little_endian_payload():
    import base64
    graph, weights = init_trivial_population("ss1", seed=0)[0]
    doc = json.loads(dumps(graph, weights))
    raw = base64.b64decode(doc["weights"]["1"]["dw"]["data"])
    assert np.frombuffer(raw, dtype="<f8").tobytes() == weights[1]["dw"].astype("<f8").tobytes()
