"""Objective evaluation: SGD training with cosine annealing, validation error, cheap counts."""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .engine import Tape, run_backward, run_forward, softmax_crossentropy
from .errors import TrainingError
from .graph import count_macs, count_params, copy_weights, init_weights

EXPENSIVE_PREFIX = "val_error"
CHEAP_NAMES = ("log10_params", "log10_macs", "latency_s")

_TIMING_LOCK = threading.Lock()


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 20
    lr_init: float = 0.01
    batch_size: int = 64
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.lr_init <= 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError(f"invalid schedule {self}")


@dataclass(frozen=True)
class LatencyConfig:
    batch_size: int = 32
    reps: int = 200
    warmup: int = 20


@dataclass(frozen=True)
class ObjectiveVector:
    expensive: tuple
    cheap: tuple
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "expensive", tuple(float(v) for v in self.expensive))
        object.__setattr__(self, "cheap", tuple(float(v) for v in self.cheap))
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) != len(self.expensive) + len(self.cheap):
            raise ValueError("one name per objective required")
        if any(not 0.0 <= v <= 1.0 for v in self.expensive):
            raise ValueError(f"expensive objectives must lie in [0, 1]: {self.expensive}")
        if not all(math.isfinite(v) for v in self.cheap):
            raise ValueError(f"cheap objectives must be finite: {self.cheap}")

    @property
    def values(self):
        return self.expensive + self.cheap

    def as_dict(self):
        return dict(zip(self.names, self.values))


def cosine_lr(step, total_steps, lr_init):
    """``lr_init * 0.5 * (1 + cos(pi * step / total_steps))``; 0 at the last step."""
    if total_steps <= 0:
        return lr_init
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(weights, grads, lr, weight_decay=0.0, nodes=None):
    """In-place SGD on learnable parameters, optionally restricted to ``nodes``."""
    for n, g in grads.items():
        if nodes is not None and n not in nodes:
            continue
        params = weights[n]
        for name, gv in g.items():
            if weight_decay and name in L.DECAYED:
                gv = gv + weight_decay * params[name]
            params[name] -= lr * gv


def train_network(graph, weights, data, schedule: TrainSchedule, stats=None):
    """Train a copy of ``weights`` on ``data`` and return ``(weights, per-step losses)``.

    Step ``t`` of ``T = epochs * ceil(N / batch_size)`` uses the cosine-annealed rate
    from ``schedule.lr_init`` down to 0. Mini-batch order is drawn from
    ``schedule.seed``, so equal inputs give bit-identical outputs.
    """
    w = copy_weights(weights)
    n = len(data)
    per_epoch = math.ceil(n / schedule.batch_size)
    total = schedule.epochs * per_epoch
    rng = np.random.default_rng(schedule.seed)
    losses = []
    tape = Tape()
    step = 0
    for _ in range(schedule.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * schedule.batch_size:(b + 1) * schedule.batch_size]
            x = data.images[idx]
            logits = run_forward(graph, w, x, L.TRAIN, tape, check=False)
            loss, g = softmax_crossentropy(logits, data.labels[idx]) if np.isfinite(logits).all() \
                else (float("nan"), None)
            if not math.isfinite(loss):
                raise TrainingError(step, loss)
            grads = run_backward(graph, w, x, g, tape)
            sgd_step(w, grads, cosine_lr(step, total, schedule.lr_init), schedule.weight_decay)
            losses.append(loss)
            step += 1
    if stats is not None:
        stats["train_steps"] = stats.get("train_steps", 0) + step
        stats["trainings"] = stats.get("trainings", 0) + 1
    return w, losses


def predict(graph, weights, images, batch_size=500):
    out = [run_forward(graph, weights, images[i:i + batch_size], L.INFER)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, graph.num_classes))


def evaluate_error(graph, weights, data) -> float:
    """Misclassification rate in inference mode (ties resolve to the lowest class index)."""
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    pred = predict(graph, weights, data.images).argmax(axis=1)
    return float(np.count_nonzero(pred != data.labels)) / len(data)


def measure_latency(graph, weights, batch_size=32, reps=200, warmup=20, seed=0) -> float:
    """Mean wall-clock seconds of one inference pass on a random batch, after warmup."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    x = np.random.default_rng(seed).random((batch_size,) + graph.input_spec)
    with _TIMING_LOCK:
        for _ in range(warmup):
            run_forward(graph, weights, x, L.INFER, check=False)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            run_forward(graph, weights, x, L.INFER, check=False)
            times.append(time.perf_counter() - t0)
    return float(np.mean(times))


def compute_cheap(graph, names=("log10_params",), weights=None, latency: LatencyConfig | None = None):
    """Cheap objectives from the architecture alone (latency also runs the weights)."""
    out = []
    for name in names:
        if name == "log10_params":
            out.append(math.log10(max(count_params(graph), 1)))
        elif name == "log10_macs":
            out.append(math.log10(max(count_macs(graph), 1)))
        elif name == "latency_s":
            if weights is None:
                raise ValueError("latency needs weights")
            cfg = latency or LatencyConfig()
            out.append(measure_latency(graph, weights, cfg.batch_size, cfg.reps, cfg.warmup))
        else:
            raise ValueError(f"unknown cheap objective {name!r}")
    return tuple(out)


@dataclass
class EvalConfig:
    cheap_names: tuple = ("log10_params",)
    tasks: tuple = ("main",)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    reinit: bool = False  # no-Lamarckism: train from scratch instead of inherited weights


def objective_names(cfg: EvalConfig):
    exp = [EXPENSIVE_PREFIX if t == "main" else f"{EXPENSIVE_PREFIX}_{t}" for t in cfg.tasks]
    return tuple(exp) + tuple(cfg.cheap_names)


def compute_objectives(graph, weights, train, val, schedule: TrainSchedule, cfg: EvalConfig,
                       init_seed=0, trainer=None, stats=None):
    """Train then evaluate every expensive task; returns ``(ObjectiveVector, weights)``.

    The returned weights are those trained on the first task; they are what children
    inherit. Further tasks each start from the same starting weights.
    """
    if cfg.reinit:
        weights = init_weights(graph, np.random.default_rng(init_seed))
    trainer = trainer or train_network
    errors = []
    kept = None
    for i, task in enumerate(cfg.tasks):
        trained, _ = trainer(graph, weights, train.task(task), schedule, stats=stats)
        errors.append(evaluate_error(graph, trained, val.task(task)))
        if i == 0:
            kept = trained
    cheap = compute_cheap(graph, cfg.cheap_names, kept, cfg.latency)
    return ObjectiveVector(errors, cheap, objective_names(cfg)), kept
