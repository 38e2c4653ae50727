"""Multi-objective architecture search driven by network morphisms, on numpy."""

from .config import SearchConfig, parse_config
from .graph import ArchGraph, init_trivial_population, validate
from .pareto import dominates, hypervolume, pareto_front
from .search import random_search_baseline, run_search

__all__ = ["ArchGraph", "SearchConfig", "dominates", "hypervolume", "init_trivial_population",
           "parse_config", "pareto_front", "random_search_baseline", "run_search", "validate"]
