"""Search configuration: dataclasses, YAML/JSON parsing and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from importlib import resources

import jsonschema
import yaml

from .errors import ConfigError
from .graph import SS1, MacroSpec, SearchSpaceConstraint
from .morph import ALL_OPS, APPROX_OPS, RepairConfig
from .objectives import EvalConfig, LatencyConfig, TrainSchedule, objective_names

CONFIG_VERSION = 1

# Reference point per objective for the hypervolume; every feasible value dominates it.
HV_REFERENCE = {"log10_params": 10.0, "log10_macs": 12.0, "latency_s": 10.0}


@dataclass(frozen=True)
class Ablations:
    no_anm: bool = False
    no_lamarck: bool = False
    no_kde: bool = False


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    num_examples: int = 2400
    num_classes: int = 4
    image_size: int = 12
    noise: float = 0.35
    seed: int = 0
    val_fraction: float = 1 / 6
    images_path: str | None = None
    labels_path: str | None = None


@dataclass(frozen=True)
class SearchConfig:
    n_gen: int = 100
    n_pc: int = 32
    n_ac: int = 8
    space: str = SS1
    enabled_ops: tuple = ALL_OPS
    seed: int = 0
    workers: int = 1
    ablations: Ablations = field(default_factory=Ablations)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    repair: RepairConfig = field(default_factory=RepairConfig)
    constraint: SearchSpaceConstraint = field(default_factory=SearchSpaceConstraint)
    macro: MacroSpec = field(default_factory=MacroSpec)
    cheap_objectives: tuple = ("log10_params",)
    tasks: tuple = ("main",)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hv_reference: tuple | None = None
    baseline_max_ops: int = 10
    cache_dir: str | None = None
    check_front: bool = False
    format_version: int = CONFIG_VERSION

    def __post_init__(self):
        problems = semantic_problems(self)
        if problems:
            raise ConfigError(problems)

    @property
    def ops(self):
        """Operators in play after ablations."""
        ops = tuple(self.enabled_ops)
        if self.ablations.no_anm:
            ops = tuple(op for op in ops if op not in APPROX_OPS)
        return ops

    @property
    def eval_config(self) -> EvalConfig:
        return EvalConfig(tuple(self.cheap_objectives), tuple(self.tasks), self.latency,
                          reinit=self.ablations.no_lamarck)

    @property
    def objective_names(self):
        return objective_names(self.eval_config)

    @property
    def reference_point(self):
        if self.hv_reference is not None:
            return tuple(self.hv_reference)
        return tuple(1.0 for _ in self.tasks) + tuple(HV_REFERENCE[c] for c in self.cheap_objectives)

    def with_overrides(self, **changes):
        return replace(self, **changes)


def semantic_problems(cfg: SearchConfig):
    problems = []
    if cfg.n_ac > cfg.n_pc:
        problems.append(f"n_ac ({cfg.n_ac}) must not exceed n_pc ({cfg.n_pc})")
    if cfg.n_gen < 0:
        problems.append("n_gen must be non-negative")
    if cfg.format_version != CONFIG_VERSION:
        problems.append(f"format_version {cfg.format_version} is not {CONFIG_VERSION}")
    if not cfg.ops:
        problems.append("no operators left after ablations")
    if cfg.dataset.source == "idx" and not (cfg.dataset.images_path and cfg.dataset.labels_path):
        problems.append("dataset.source 'idx' needs images_path and labels_path")
    n_obj = len(cfg.tasks) + len(cfg.cheap_objectives)
    if cfg.hv_reference is not None and len(cfg.hv_reference) != n_obj:
        problems.append(f"hv_reference needs {n_obj} values")
    if cfg.tasks and cfg.tasks[0] != "main":
        problems.append("the first task must be 'main'")
    return problems


@lru_cache(maxsize=None)
def schema():
    return json.loads(resources.files("lemonade").joinpath("schemas/config.schema.json").read_text())


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v


def config_from_dict(data: dict | None) -> SearchConfig:
    """Validate a plain mapping and fill in defaults. All problems are reported together."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(["configuration must be a mapping"])
    problems = []
    for err in sorted(jsonschema.Draft202012Validator(schema()).iter_errors(data), key=str):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    if problems:
        raise ConfigError(problems)
    nested = {"ablations": Ablations, "schedule": TrainSchedule, "repair": RepairConfig,
              "constraint": SearchSpaceConstraint, "macro": MacroSpec, "latency": LatencyConfig,
              "dataset": DatasetConfig}
    kwargs = {}
    for f in fields(SearchConfig):
        if f.name not in data:
            continue
        v = data[f.name]
        if f.name in nested:
            v = nested[f.name](**{k: _tuples(x) for k, x in v.items()})
        else:
            v = _tuples(v)
        kwargs[f.name] = v
    return SearchConfig(**kwargs)


def parse_config(text: str) -> SearchConfig:
    """Parse YAML (or JSON) text into a validated :class:`SearchConfig`."""
    try:
        data = yaml.safe_load(text) if text and text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"unparseable configuration: {exc}"]) from None
    return config_from_dict(data)


def config_to_dict(cfg: SearchConfig) -> dict:
    def plain(v):
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    d = plain(asdict(cfg))
    d["schedule"].pop("seed", None)
    return d
