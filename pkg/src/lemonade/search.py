"""The evolutionary loop: inverse-density parent sampling, child acceptance, front update,
plus the random-search baseline and the training cache."""

from __future__ import annotations

import hashlib
import io
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import SearchConfig
from .data import Dataset, gen_synthetic, load_idx, split
from .errors import MorphError, TrainingError
from .graph import count_macs, count_params, init_trivial_population, init_weights
from .kde import accept_probs, fit_kde, parent_probs, sample_without_replacement
from .morph import Child, generate_child
from .objectives import ObjectiveVector, compute_cheap, compute_objectives, train_network
from .pareto import dominates, hypervolume, nondominated_mask, pareto_front
from .serialize import dumps

log = logging.getLogger(__name__)

MAX_PARENT_RESAMPLES = 5

# stream tags mixed into the run seed
_T_INIT, _T_TRAIN, _T_REINIT, _T_GEN, _T_CHILD, _T_BASELINE = range(6)


def derive_seed(seed, *tag) -> int:
    return int(np.random.SeedSequence([seed, *tag]).generate_state(1)[0])


@dataclass
class PopulationMember:
    id: int
    graph: object
    weights: dict
    objectives: ObjectiveVector
    parent_id: int | None
    generation_born: int
    operator_history: list = field(default_factory=list)
    eval_seconds: float = field(default=0.0, compare=False)

    @property
    def param_count(self):
        return count_params(self.graph)

    @property
    def mac_count(self):
        return count_macs(self.graph)


@dataclass
class SearchState:
    """Everything needed to continue a run: the front, counters and history."""

    generation: int
    population: list
    next_id: int
    f_exp_count: int = 0
    f_cheap_count: int = 0
    history: list = field(default_factory=list)


@dataclass
class SearchData:
    train: Dataset
    val: Dataset


def load_data(cfg: SearchConfig) -> SearchData:
    d = cfg.dataset
    if d.source == "synthetic":
        full = gen_synthetic(d.num_examples, d.num_classes, d.image_size, d.seed, d.noise)
    else:
        full = load_idx(d.images_path, d.labels_path, d.num_classes)
    train, val = split(full, d.val_fraction, d.seed)
    return SearchData(train, val)


# --------------------------------------------------------------------------- training cache


class TrainingCache:
    """Content-addressed store of training results.

    The key hashes the architecture, the starting weights, the schedule and the data, so
    a hit returns exactly what training would have produced.
    """

    def __init__(self, directory, trainer=train_network):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.trainer = trainer
        self.hits = 0
        self.misses = 0
        self._fingerprints = {}

    def key(self, graph, weights, data, schedule):
        h = hashlib.sha256()
        h.update(dumps(graph).encode())
        for n in sorted(weights):
            for name in sorted(weights[n]):
                h.update(f"{n}/{name}".encode())
                h.update(np.ascontiguousarray(weights[n][name], dtype="<f8").tobytes())
        h.update(repr(schedule).encode())
        fp = self._fingerprints.get(id(data))
        if fp is None or fp[0] is not data:
            fp = self._fingerprints[id(data)] = (data, data.fingerprint())
        h.update(fp[1].encode())
        return h.hexdigest()

    def __call__(self, graph, weights, data, schedule, stats=None):
        path = self.dir / f"{self.key(graph, weights, data, schedule)}.npz"
        if path.exists():
            self.hits += 1
            with np.load(path) as z:
                out = {}
                for k in z.files:
                    if k == "__losses__":
                        continue
                    n, name = k.split("/")
                    out.setdefault(int(n), {})[name] = z[k].copy()
                return out, list(z["__losses__"])
        self.misses += 1
        trained, losses = self.trainer(graph, weights, data, schedule, stats=stats)
        arrays = {f"{n}/{name}": v for n, p in trained.items() for name, v in p.items()}
        arrays["__losses__"] = np.asarray(losses, dtype=np.float64)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        fd, tmp = tempfile.mkstemp(dir=self.dir, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
        return trained, losses


def make_trainer(cfg: SearchConfig, trainer=None):
    if trainer is not None:
        return trainer
    if cfg.cache_dir:
        return TrainingCache(cfg.cache_dir)
    return train_network


# --------------------------------------------------------------------------- helpers


def _schedule(cfg, *tag):
    return replace(cfg.schedule, seed=derive_seed(cfg.seed, _T_TRAIN, *tag))


def _evaluate(cfg, data, trainer, graph, weights, *tag):
    """``(objectives, trained weights, wall seconds)`` for one network."""
    t0 = time.perf_counter()
    obj, trained = compute_objectives(graph, weights, data.train, data.val, _schedule(cfg, *tag),
                                      cfg.eval_config,
                                      init_seed=derive_seed(cfg.seed, _T_REINIT, *tag),
                                      trainer=trainer)
    return obj, trained, time.perf_counter() - t0


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def report(state: SearchState, cfg: SearchConfig, **extra) -> dict:
    """Per-generation summary: front size, hypervolume and objective extents."""
    vals = np.array([m.objectives.values for m in state.population])
    rec = {"gen": state.generation, "front_size": len(state.population)}
    rec.update(extra)
    ref = cfg.reference_point
    rec["hypervolume"] = hypervolume(vals, ref) if len(ref) in (2, 3) else None
    for i, name in enumerate(cfg.objective_names):
        rec[f"min_{name}"] = float(vals[:, i].min())
        rec[f"max_{name}"] = float(vals[:, i].max())
    rec["f_exp_count"] = state.f_exp_count
    rec["f_cheap_count"] = state.f_cheap_count
    return rec


def check_front(survivors, candidates):
    """Brute-force validity of a front update; raises AssertionError when violated."""
    for a in survivors:
        for b in survivors:
            assert not dominates(a.objectives, b.objectives), (a.id, b.id)
    kept = {m.id for m in survivors}
    for c in candidates:
        if c.id in kept:
            continue
        assert any(dominates(s.objectives, c.objectives)
                   or s.objectives.values == c.objectives.values for s in survivors), c.id


def initial_state(cfg: SearchConfig, data: SearchData, trainer=None, on_eval=None) -> SearchState:
    """Evaluate the four trivial networks and keep their front (generation 0)."""
    trainer = make_trainer(cfg, trainer)
    nets = init_trivial_population(cfg.space, derive_seed(cfg.seed, _T_INIT),
                                   data.train.input_spec, data.train.num_classes, cfg.macro)
    members = []
    for i, (g, w) in enumerate(nets):
        obj, trained, secs = _evaluate(cfg, data, trainer, g, w, 0, i)
        m = PopulationMember(i, g, trained, obj, None, 0, [], secs)
        members.append(m)
        if on_eval:
            on_eval(m, 0)
    state = SearchState(0, pareto_front(members), len(members), f_exp_count=len(members))
    if cfg.check_front:
        check_front(state.population, members)
    state.history.append(report(state, cfg, proposed=0, accepted=len(members),
                                survived=len(state.population), warnings=[]))
    return state


@dataclass
class Proposal:
    """A proposed child. Its approximate-morphism repair is deferred until acceptance."""

    parent: PopulationMember
    child: Child
    cheap: tuple
    rng_state: dict
    repair_idx: np.ndarray


def _propose(cfg, data, pop, pp, gen, index, gen_rng):
    """One unrepaired child from a parent drawn by ``pp``; resamples the parent on exhaustion.

    Returns a :class:`Proposal`, or ``None`` and the last error.
    """
    crng = np.random.default_rng([cfg.seed, _T_CHILD, gen, index])
    last = None
    for _ in range(MAX_PARENT_RESAMPLES):
        pi = int(gen_rng.choice(len(pop), p=pp))
        parent = pop[pi]
        n = min(cfg.repair.n_examples, len(data.train))
        idx = np.sort(crng.choice(len(data.train), n, replace=False))
        state = crng.bit_generator.state
        try:
            child = generate_child(parent.graph, parent.weights, cfg.space, cfg.ops, crng,
                                   cfg.constraint, None, data.train.images[idx])
        except MorphError as exc:
            last = exc
            continue
        cheap = compute_cheap(child.graph, cfg.cheap_objectives, child.weights, cfg.latency)
        return Proposal(parent, child, cheap, state, idx), None
    log.warning("generation %d child %d: %s", gen, index, last)
    return None, last


def _repaired_child(cfg, data, prop: Proposal) -> Child:
    """Replay the child's operator draws with distillation repair switched on.

    The random draws do not depend on weights, so the replay builds the same
    architecture; only the weights after each approximate morphism differ.
    """
    if cfg.ablations.no_lamarck or all(o.is_exact for o in prop.child.outcomes):
        return prop.child
    crng = np.random.default_rng()
    crng.bit_generator.state = prop.rng_state
    child = generate_child(prop.parent.graph, prop.parent.weights, cfg.space, cfg.ops, crng,
                           cfg.constraint, cfg.repair, data.train.images[prop.repair_idx])
    if child.graph != prop.child.graph:
        raise AssertionError("repair replay diverged from the proposed architecture")
    return child


def lemonade_generation(state: SearchState, cfg: SearchConfig, data: SearchData, trainer=None,
                        on_eval=None):
    """Run one generation and return ``(new_state, report)``."""
    trainer = make_trainer(cfg, trainer)
    gen = state.generation + 1
    pop = state.population
    gen_rng = np.random.default_rng([cfg.seed, _T_GEN, gen])
    uniform = cfg.ablations.no_kde
    cheap = np.array([m.objectives.cheap for m in pop])
    kde = fit_kde(cheap)
    pp = parent_probs(kde.density(cheap), uniform)

    warnings = []
    proposals = []
    for i in range(cfg.n_pc):
        prop, err = _propose(cfg, data, pop, pp, gen, i, gen_rng)
        if prop is None:
            warnings.append(f"child {i}: parents exhausted ({err})")
            continue
        proposals.append(prop)
    f_cheap = state.f_cheap_count + len(proposals)

    accepted = []
    if proposals:
        ap = accept_probs(kde.density(np.array([p.cheap for p in proposals])), uniform)
        accepted = [(p.parent, _repaired_child(cfg, data, p), p.cheap)
                    for p in (proposals[i] for i in sample_without_replacement(ap, cfg.n_ac,
                                                                              gen_rng))]

    ids = list(range(state.next_id, state.next_id + len(accepted)))

    def evaluate(k):
        parent, child, _ = accepted[k]
        try:
            return _evaluate(cfg, data, trainer, child.graph, child.weights, 1, gen, ids[k])
        except TrainingError as exc:
            return exc

    if cfg.workers > 1 and len(accepted) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(evaluate, range(len(accepted))))
    else:
        results = [evaluate(k) for k in range(len(accepted))]

    newcomers = []
    for k, ((parent, child, _), res) in enumerate(zip(accepted, results)):
        if isinstance(res, TrainingError):
            warnings.append(f"member {ids[k]}: {res}")
            continue
        obj, trained, secs = res
        history = parent.operator_history + [_clean(o.as_record()) for o in child.outcomes]
        m = PopulationMember(ids[k], child.graph, trained, obj, parent.id, gen, history, secs)
        newcomers.append(m)
        if on_eval:
            on_eval(m, gen)

    candidates = pop + newcomers
    front = pareto_front(candidates)
    if cfg.check_front:
        check_front(front, candidates)
    new_ids = {m.id for m in newcomers}
    new_state = SearchState(gen, front, state.next_id + len(accepted),
                            state.f_exp_count + len(accepted), f_cheap, list(state.history))
    rec = report(new_state, cfg, proposed=len(proposals), accepted=len(accepted),
                 survived=sum(m.id in new_ids for m in front), warnings=warnings)
    new_state.history.append(rec)
    return new_state, rec


def run_search(cfg: SearchConfig, data: SearchData | None = None, state: SearchState | None = None,
               trainer=None, on_generation=None, on_eval=None, stop_after=None):
    """Evolve from ``state`` (or a fresh initial population) up to ``cfg.n_gen`` generations.

    ``on_generation(state)`` runs after every completed generation, including the
    initial one; it is where checkpoints are written. ``stop_after`` ends the run early
    at that generation, as if the process had been killed.
    """
    data = data or load_data(cfg)
    trainer = make_trainer(cfg, trainer)
    if state is None:
        state = initial_state(cfg, data, trainer, on_eval)
        if on_generation:
            on_generation(state)
    while state.generation < cfg.n_gen:
        if stop_after is not None and state.generation >= stop_after:
            break
        t0 = time.perf_counter()
        state, rec = lemonade_generation(state, cfg, data, trainer, on_eval)
        log.info("gen %d: front %d, hv %s, accepted %d (%.1fs)", rec["gen"], rec["front_size"],
                 rec["hypervolume"], rec["accepted"], time.perf_counter() - t0)
        if on_generation:
            on_generation(state)
    return state


# --------------------------------------------------------------------------- baseline


def random_search_baseline(cfg: SearchConfig, data: SearchData | None = None, budget=None,
                           trainer=None, on_eval=None):
    """Random architectures trained from scratch under the same schedule.

    The four trivial networks are evaluated first, exactly as in the evolutionary run;
    every further network applies a uniformly drawn number (1 to ``baseline_max_ops``) of
    uniformly drawn operators to a uniformly drawn trivial network. ``budget`` is the
    total number of trainings, by default that of an evolutionary run without failures.
    Returns ``(front, evaluated members)``.
    """
    data = data or load_data(cfg)
    trainer = make_trainer(cfg, trainer)
    budget = 4 + cfg.n_gen * cfg.n_ac if budget is None else budget
    nets = init_trivial_population(cfg.space, derive_seed(cfg.seed, _T_INIT),
                                   data.train.input_spec, data.train.num_classes, cfg.macro)
    evaluated = []
    for b in range(budget):
        rng = np.random.default_rng([cfg.seed, _T_BASELINE, b])
        if b < len(nets):
            g, w, ops = nets[b][0], nets[b][1], []
        else:
            while True:
                base = int(rng.integers(len(nets)))
                n_ops = int(rng.integers(1, cfg.baseline_max_ops + 1))
                try:
                    child = generate_child(nets[base][0], nets[base][1], cfg.space, cfg.ops, rng,
                                           cfg.constraint, None, None, n_ops)
                    break
                except MorphError:
                    continue
            g, ops = child.graph, [_clean(o.as_record()) for o in child.outcomes]
            w = init_weights(g, np.random.default_rng([cfg.seed, _T_BASELINE, b, 1]))
        try:
            # the trivial networks train exactly as in the evolutionary run
            tag = (0, b) if b < len(nets) else (2, b)
            obj, trained, secs = _evaluate(cfg, data, trainer, g, w, *tag)
        except TrainingError as exc:
            log.warning("baseline network %d: %s", b, exc)
            continue
        m = PopulationMember(b, g, trained, obj, None, 0, ops, secs)
        evaluated.append(m)
        if on_eval:
            on_eval(m, 0)
    return pareto_front(evaluated), evaluated


def front_is_valid(members) -> bool:
    vals = np.array([m.objectives.values for m in members])
    return bool(nondominated_mask(vals).all()) if len(vals) else True
