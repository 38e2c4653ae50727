import math

import numpy as np
import pytest

from lemonade import layers as L
from lemonade import objectives as O
from lemonade.data import Dataset
from lemonade.errors import TrainingError
from lemonade.graph import ArchGraph, copy_weights, init_trivial_population, weights_equal
from lemonade.morph import insert_conv_block, widen_conv
from lemonade.objectives import (EvalConfig, ObjectiveVector, TrainSchedule, compute_cheap,
                                 compute_objectives, cosine_lr, evaluate_error, measure_latency,
                                 train_network)


def test_cosine_schedule_shape():
    assert cosine_lr(0, 100, 0.01) == 0.01
    assert cosine_lr(100, 100, 0.01) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 0.01) == pytest.approx(0.005, abs=1e-15)
    lrs = [cosine_lr(t, 100, 0.01) for t in range(101)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_training_is_deterministic(small_data):
    train, _ = small_data
    graph, weights = init_trivial_population("ss1", seed=0)[0]
    before = copy_weights(weights)
    a, la = train_network(graph, weights, train, TrainSchedule(epochs=1, seed=3))
    b, lb = train_network(graph, weights, train, TrainSchedule(epochs=1, seed=3))
    assert weights_equal(a, b) and la == lb
    assert weights_equal(weights, before)  # input weights untouched
    c, _ = train_network(graph, weights, train, TrainSchedule(epochs=1, seed=4))
    assert not weights_equal(a, c)


def test_non_finite_loss_reports_step(small_data):
    train, _ = small_data
    images = train.images.copy()
    images[5, 0, 0, 0] = np.nan
    bad = Dataset(images, train.labels, train.num_classes)
    graph, weights = init_trivial_population("ss1", seed=0)[2]
    with pytest.raises(TrainingError) as info:
        train_network(graph, weights, bad, TrainSchedule(epochs=1, batch_size=len(bad)))
    assert info.value.step == 0


def test_weight_decay_only_on_weights():
    params = {1: {"w": np.ones(3), "b": np.ones(3), "scale": np.ones(3)}}
    zero = {1: {"w": np.zeros(3), "b": np.zeros(3), "scale": np.zeros(3)}}
    O.sgd_step(params, zero, lr=0.1, weight_decay=0.5)
    assert params[1]["w"].tolist() == [0.95] * 3
    assert params[1]["b"].tolist() == [1.0] * 3 and params[1]["scale"].tolist() == [1.0] * 3


def _avg_net(in_channels, k):
    nodes = {0: L.Input(), 1: L.GlobalAvgPool(), 2: L.Dense(k), 3: L.SoftmaxHead()}
    return ArchGraph(nodes, [(0, 1, 0), (1, 2, 0), (2, 3, 0)], (in_channels, 2, 2), k)


def test_perfect_memorization_scores_zero():
    data = Dataset(np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))]), np.array([0, 1]), 2)
    g = _avg_net(1, 2)
    w = {2: {"w": np.array([[-1.0], [1.0]]), "b": np.zeros(2)}}
    assert evaluate_error(g, w, data) == 0.0


@pytest.mark.parametrize("k", [2, 4, 5])
def test_constant_logits_score_chance(k):
    n = 20 * k
    data = Dataset(np.random.default_rng(0).random((n, 1, 2, 2)), np.arange(n) % k, k)
    g = _avg_net(1, k)
    w = {2: {"w": np.zeros((k, 1)), "b": np.zeros(k)}}
    assert evaluate_error(g, w, data) == pytest.approx(1 - 1 / k, abs=0)
    assert evaluate_error(g, w, data) == evaluate_error(g, w, data)


def test_latency_positive_and_ordered():
    graph, weights = init_trivial_population("ss1", seed=0)[2]
    bigger = insert_conv_block(graph, weights, 7)
    bigger = insert_conv_block(bigger.child_graph, bigger.child_weights, 3)
    small, large = [], []
    for _ in range(5):
        small.append(measure_latency(graph, weights, 16, 10, 2))
        large.append(measure_latency(bigger.child_graph, bigger.child_weights, 16, 10, 2))
    assert min(small) > 0
    assert np.median(large) >= np.median(small)


def test_latency_counts_exactly_reps(monkeypatch):
    graph, weights = init_trivial_population("ss1", seed=0)[0]
    calls = []
    real = O.run_forward
    monkeypatch.setattr(O, "run_forward", lambda *a, **k: calls.append(1) or real(*a, **k))
    measure_latency(graph, weights, 4, reps=7, warmup=3)
    assert len(calls) == 10
    with pytest.raises(ValueError):
        measure_latency(graph, weights, reps=0)


def test_cheap_objectives():
    g = _avg_net(99, 10)  # 99 * 10 + 10 = 1000 parameters
    assert compute_cheap(g, ("log10_params",)) == (3.0,)
    graph, _ = init_trivial_population("ss1", seed=0)[1]
    again, _ = init_trivial_population("ss1", seed=9)[1]
    names = ("log10_params", "log10_macs")
    assert compute_cheap(graph, names) == compute_cheap(again, names)
    assert compute_cheap(graph, names)[1] == pytest.approx(math.log10(48496))


def test_cheap_evaluation_never_trains(monkeypatch):
    monkeypatch.setattr(O, "train_network", lambda *a, **k: pytest.fail("trained"))
    graph, weights = init_trivial_population("ss1", seed=0)[0]
    compute_cheap(graph, ("log10_params", "log10_macs", "latency_s"), weights,
                  O.LatencyConfig(4, 2, 0))


def test_objective_vector_contract():
    with pytest.raises(ValueError):
        ObjectiveVector((1.2,), (3.0,), ("e", "c"))
    with pytest.raises(ValueError):
        ObjectiveVector((0.2,), (math.inf,), ("e", "c"))
    with pytest.raises(ValueError):
        ObjectiveVector((0.2,), (3.0,), ("e",))
    v = ObjectiveVector((0.25,), (3.0,), ("e", "c"))
    assert v.values == (0.25, 3.0) and v.as_dict() == {"e": 0.25, "c": 3.0}


def test_zero_epoch_morphism_child_keeps_parent_error(small_data, trained_net):
    train, val = small_data
    graph, weights = trained_net
    sched = TrainSchedule(epochs=0)
    parent, _ = compute_objectives(graph, weights, train, val, sched, EvalConfig())
    child = widen_conv(graph, weights, 5, np.random.default_rng(0))
    got, _ = compute_objectives(child.child_graph, child.child_weights, train, val, sched,
                                EvalConfig())
    assert abs(got.expensive[0] - parent.expensive[0]) <= 1e-6
    fresh, _ = compute_objectives(child.child_graph, child.child_weights, train, val, sched,
                                  EvalConfig(reinit=True), init_seed=4)
    assert abs(fresh.expensive[0] - 0.75) <= 0.05


def test_vector_length_with_second_task(small_data):
    train, val = small_data
    graph, weights = init_trivial_population("ss1", seed=0)[0]
    cfg = EvalConfig(cheap_names=("log10_params", "log10_macs"), tasks=("main", "blob"))
    vec, _ = compute_objectives(graph, weights, train, val, TrainSchedule(epochs=0), cfg)
    assert len(vec.values) == 4
    assert vec.names == ("val_error", "val_error_blob", "log10_params", "log10_macs")
