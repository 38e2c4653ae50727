import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lemonade import layers as L
from lemonade.engine import Tape, run_backward, run_forward
from lemonade.errors import MorphError
from lemonade.graph import (SearchSpaceConstraint, chain_net, count_params, init_weights,
                            validate, weights_equal)
from lemonade.morph import (ALL_OPS, EXACT_OPS, MorphismOp, RepairConfig, add_skip,
                            generate_child, insert_conv_block, prune_filters, remove_layer,
                            repair_distill, to_separable, widen_conv)
from lemonade.objectives import softmax_crossentropy

# node ids of chain_net((8, 16, 32), ...): convs 1, 5, 9; ReLUs 3, 7, 11; pools 4, 8;
# GAP 12, dense 13, head 14
TOL = 1e-8
REPAIR = RepairConfig(epochs=3, batch_size=32, learning_rate=0.05)


def randomized(graph, seed=0):
    """Weights moved off their initial values so that no layer acts trivially."""
    rng = np.random.default_rng(seed)
    w = init_weights(graph, rng)
    for params in w.values():
        for name, v in params.items():
            if name == "var":
                params[name] = rng.uniform(0.5, 2.0, size=v.shape)
            elif name != "lam":
                params[name] = v + rng.normal(scale=0.2, size=v.shape)
    return w


def images(n=64, seed=5, shape=(1, 12, 12)):
    return np.random.default_rng(seed).random((n, *shape))


def max_diff(g1, w1, g2, w2, x):
    return float(np.abs(run_forward(g1, w1, x) - run_forward(g2, w2, x)).max())


@pytest.fixture
def net():
    g = chain_net((8, 16, 32), False)
    return g, randomized(g)


def test_operator_exactness_flags():
    assert all(MorphismOp(k, (1,)).is_exact == (k in EXACT_OPS) for k in ALL_OPS)


@pytest.mark.parametrize("site", [0, 3, 7, 11])
def test_insert_preserves_function(net, site):
    g, w = net
    out = insert_conv_block(g, w, site, data=images(32, seed=1))
    assert max_diff(g, w, out.child_graph, out.child_weights, images()) <= TOL
    plain = insert_conv_block(g, w, site)
    assert max_diff(g, w, plain.child_graph, plain.child_weights, images()) <= TOL
    assert out.delta_before == out.delta_after == 0.0


@pytest.mark.parametrize("site,c", [(3, 8), (7, 16), (11, 32)])
def test_insert_param_increase(net, site, c):
    g, w = net
    out = insert_conv_block(g, w, site)
    assert count_params(out.child_graph) - count_params(g) == 9 * c * c + c + 2 * c


def test_insert_rejects_non_relu_site(net):
    g, w = net
    for site in (1, 2, 4):
        with pytest.raises(MorphError) as info:
            insert_conv_block(g, w, site)
        assert info.value.code == "precondition"


@pytest.mark.parametrize("site", [1, 5, 9])
def test_widen_preserves_and_can_learn(net, site):
    g, w = net
    out = widen_conv(g, w, site, np.random.default_rng(3))
    cg, cw = out.child_graph, out.child_weights
    assert cg.shapes[site][0] == 2 * g.shapes[site][0]
    assert validate(cg) == []
    assert max_diff(g, w, cg, cw, images()) <= TOL
    # the zero slices feeding on the new channels receive gradient
    x = images(16)
    tape = Tape()
    logits = run_forward(cg, cw, x, L.TRAIN, tape)
    _, grad = softmax_crossentropy(logits, np.arange(16) % 4)
    grads = run_backward(cg, cw, x, grad, tape)
    c = g.shapes[site][0]
    consumer = {1: 5, 5: 9, 9: 13}[site]
    gw = grads[consumer]["w"]
    new_slice = gw[:, c:] if gw.ndim == 2 else gw[:, c:, :, :]
    assert np.linalg.norm(new_slice) > 0


def test_widen_rejects_non_conv(net):
    g, w = net
    with pytest.raises(MorphError):
        widen_conv(g, w, 13)


def test_add_skip_is_bit_exact_and_lambda_learns(net):
    g, w = net
    deeper = insert_conv_block(g, w, 7)
    dg, dw = deeper.child_graph, deeper.child_weights
    out = add_skip(dg, dw, 7, 17, "add")
    x = images()
    assert np.array_equal(run_forward(dg, dw, x), run_forward(out.child_graph, out.child_weights, x))
    join = out.new_nodes[0]
    tape = Tape()
    cw = out.child_weights
    logits = run_forward(out.child_graph, cw, x, L.TRAIN, tape)
    _, grad = softmax_crossentropy(logits, np.arange(64) % 4)
    grads = run_backward(out.child_graph, cw, x, grad, tape)
    assert abs(float(grads[join]["lam"])) > 0


def test_concat_skip_preserves(net):
    g, w = net
    out = add_skip(g, w, 4, 7, "concat")
    assert out.child_graph.shapes[out.new_nodes[0]] == (24, 6, 6)
    assert max_diff(g, w, out.child_graph, out.child_weights, images()) <= TOL


def test_skip_errors(net):
    g, w = net
    with pytest.raises(MorphError) as info:
        add_skip(g, w, 4, 7, "add")
    assert info.value.code == "shape"
    with pytest.raises(MorphError) as info:
        add_skip(g, w, 3, 7, "concat")  # 12x12 into 6x6
    assert info.value.code == "shape"
    with pytest.raises(MorphError) as info:
        add_skip(g, w, 7, 3, "concat")
    assert info.value.code == "cycle"


@given(seed=st.integers(0, 10_000), n_ops=st.integers(1, 5))
def test_exact_composition_preserves(seed, n_ops):
    g = chain_net((4, 8), False, pools=1)
    w = randomized(g, seed)
    child = generate_child(g, w, enabled_ops=EXACT_OPS, rng=np.random.default_rng(seed),
                           n_ops=n_ops)
    assert len(child.outcomes) == n_ops
    assert max_diff(g, w, child.graph, child.weights, images(16, seed)) <= n_ops * TOL
    assert count_params(child.graph) >= count_params(g)


def test_remove_inverts_insert(net):
    g, w = net
    x = images(128, seed=2)
    deeper = insert_conv_block(g, w, 7, data=x)
    conv = min(deeper.new_nodes)
    out = remove_layer(deeper.child_graph, deeper.child_weights, conv, REPAIR, x)
    assert out.delta_before <= 1e-10
    assert out.child_graph.nodes == g.nodes
    assert max_diff(g, w, out.child_graph, out.child_weights, images()) <= 1e-6


def test_remove_trained_conv_repairs(trained_net, small_data):
    g, w = trained_net
    x = small_data[0].images[:128]
    raw = remove_layer(g, w, 5, None)
    out = remove_layer(g, w, 5, REPAIR, x)
    assert out.delta_before > 0
    assert out.delta_after <= out.delta_before
    assert out.affected_nodes
    assert validate(out.child_graph) == []
    for n, params in out.child_weights.items():
        if n not in out.affected_nodes:
            assert weights_equal({n: params}, {n: raw.child_weights[n]})


def test_remove_respects_min_convs(net):
    g, w = net
    with pytest.raises(MorphError) as info:
        remove_layer(g, w, 5, None, constraint=SearchSpaceConstraint(min_convs=3))
    assert info.value.code == "constraint"


def test_prune_half_exact_count(net):
    g, w = net
    out = prune_filters(g, w, 1, 0.5)
    conv1, conv5 = g.nodes[1], g.nodes[5]
    removed = 9 * 1 * 4 + (4 if conv1.has_bias else 0) + 2 * 4 + 9 * 4 * 16
    assert out.child_graph.nodes[1].out_channels == 4
    assert count_params(g) - count_params(out.child_graph) == removed
    assert conv5.out_channels == 16


def test_prune_keeps_largest_filters(net):
    g, w = net
    w[1]["w"] = w[1]["w"] * np.arange(1, 9)[:, None, None, None]
    out = prune_filters(g, w, 1, 0.5)
    assert np.array_equal(out.child_weights[1]["w"], w[1]["w"][4:])


def test_prune_dead_filters_is_free(trained_net, small_data):
    g, w = trained_net
    w = {n: {k: v.copy() for k, v in p.items()} for n, p in w.items()}
    dead = np.arange(8)
    w[5]["w"][dead] = 0.0
    if "b" in w[5]:
        w[5]["b"][dead] = 0.0
    w[9]["w"][:, dead] = 0.0
    out = prune_filters(g, w, 5, 0.5, REPAIR, small_data[0].images[:64])
    assert out.delta_before <= 1e-12
    assert out.delta_after <= out.delta_before + 1e-12


def test_prune_repair_monotone(trained_net, small_data):
    g, w = trained_net
    out = prune_filters(g, w, 9, 0.75, REPAIR, small_data[0].images[:128])
    assert out.child_graph.nodes[9].out_channels == 24
    assert out.delta_after <= out.delta_before


def test_prune_floor():
    g = chain_net((4, 8), False, pools=1)
    with pytest.raises(MorphError):
        prune_filters(g, randomized(g), 1, 0.5, constraint=SearchSpaceConstraint(1, 4))


def test_to_separable_counts():
    g = chain_net((16, 16), False, input_spec=(16, 8, 8))
    w = randomized(g)
    out = to_separable(g, w, 5)
    bias = 16 if g.nodes[5].has_bias else 0
    plain = 3 * 3 * 16 * 16 + bias
    sep = 3 * 3 * 16 + 16 * 16 + bias
    assert (plain, sep) == (2304 + bias, 400 + bias)
    assert count_params(g) - count_params(out.child_graph) == plain - sep
    assert isinstance(out.child_graph.nodes[5], L.SeparableConv2d)
    with pytest.raises(MorphError):
        to_separable(out.child_graph, out.child_weights, 5)
    one = chain_net((8,), False, kernel=1)
    with pytest.raises(MorphError):
        to_separable(one, randomized(one), 1)


def test_to_separable_repair_monotone(trained_net, small_data):
    g, w = trained_net
    out = to_separable(g, w, 5, REPAIR, small_data[0].images[:128])
    assert out.delta_after <= out.delta_before


def test_repair_divergence_keeps_best_snapshot(trained_net, small_data):
    g, w = trained_net
    wild = RepairConfig(epochs=3, batch_size=32, learning_rate=1e8, n_examples=128)
    out = to_separable(g, w, 5, wild, small_data[0].images[:128])
    assert np.isfinite(out.delta_after) and out.delta_after <= out.delta_before
    assert all(np.isfinite(v).all() for p in out.child_weights.values() for v in p.values())


def test_repair_noop_and_freeze(trained_net, small_data):
    g, w = trained_net
    x = small_data[0].images[:64]
    got, before, after = repair_distill(g, w, g, w, {5, 6}, REPAIR, x)
    assert before <= 1e-10 and after <= 1e-10
    assert weights_equal(got, w)
    with pytest.raises(ValueError):
        repair_distill(g, w, g, w, {5}, REPAIR, x[:0])
    with pytest.raises(ValueError):
        repair_distill(g, w, g, w, set(), REPAIR, x)
    with pytest.raises(ValueError):
        RepairConfig(epochs=0)


def test_generate_child_deterministic_and_valid(trained_net, small_data):
    g, w = trained_net
    x = small_data[0].images[:64]
    c = SearchSpaceConstraint()
    a = generate_child(g, w, rng=np.random.default_rng(11), constraint=c, repair=REPAIR, data=x)
    b = generate_child(g, w, rng=np.random.default_rng(11), constraint=c, repair=REPAIR, data=x)
    assert a.graph == b.graph and weights_equal(a.weights, b.weights)
    assert a.operators == b.operators and 1 <= len(a.operators) <= 3
    assert validate(a.graph, c) == []


def test_generate_child_exhausted():
    g = chain_net((4,), False)
    with pytest.raises(MorphError) as info:
        generate_child(g, randomized(g), enabled_ops=("prune_filters",),
                       constraint=SearchSpaceConstraint(1, 4))
    assert info.value.code == "exhausted"
