"""Command-line entry point: ``lemonade {search,baseline,ablate,export,resume}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import Ablations, SearchConfig, config_to_dict, parse_config
from .errors import LemonadeError
from .runio import (RunLog, atomic_write, export_front, latest_checkpoint, read_checkpoint,
                    write_checkpoint)
from .search import load_data, make_trainer, random_search_baseline, run_search

WORKERS_ENV = "LEMONADE_WORKERS"
ABLATIONS = ("no_anm", "no_lamarck", "no_kde")

log = logging.getLogger("lemonade")


def build_parser():
    p = argparse.ArgumentParser(prog="lemonade", description="Multi-objective architecture search "
                                "with network morphisms.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="YAML or JSON configuration file")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--generations", type=int, help="override n_gen")
            for flag in ABLATIONS:
                sp.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--workers", type=int, help=f"parallel trainings (env {WORKERS_ENV})")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("search", help="run the evolutionary search"))
    common(sub.add_parser("baseline", help="random search with the same training budget"))
    common(sub.add_parser("ablate", help="search once per single deactivated component"))
    sp = sub.add_parser("export", help="export the front of the latest checkpoint")
    common(sp, config=False)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp = sub.add_parser("resume", help="continue a run from its latest checkpoint")
    common(sp, config=False)
    sp.add_argument("--generations", type=int, help="override n_gen")
    return p


def _workers(args, cfg):
    if args.workers is not None:
        return args.workers
    if os.environ.get(WORKERS_ENV):
        return int(os.environ[WORKERS_ENV])
    return cfg.workers


def load_config(args) -> SearchConfig:
    cfg = parse_config(args.config.read_text() if args.config else "")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.generations is not None:
        changes["n_gen"] = args.generations
    flags = {a: getattr(args, a) for a in ABLATIONS if getattr(args, a)}
    if flags:
        changes["ablations"] = replace(cfg.ablations, **flags)
    cfg = replace(cfg, **changes)
    return replace(cfg, workers=_workers(args, cfg))


def _reports_writer(out: Path):
    path = out / "generations.jsonl"

    def write(history):
        atomic_write(path, "".join(json.dumps(r) + "\n" for r in history).encode())
    return write


def search(cfg: SearchConfig, out: Path, state=None, data=None):
    """Run (or continue) a search writing checkpoints, logs and the final export to ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", json.dumps(config_to_dict(cfg), indent=1).encode())
    run_log = RunLog(out / "run_log.jsonl")
    reports = _reports_writer(out)
    if state is None:
        run_log.reset()
    else:
        run_log.truncate_after(state.generation)
        reports(state.history)

    def on_generation(st):
        if st.generation > 0:
            write_checkpoint(st, cfg, out)
        reports(st.history)
        rec = st.history[-1]
        print(f"gen {rec['gen']:3d}  front {rec['front_size']:3d}  hv {rec['hypervolume']}  "
              f"f_exp {rec['f_exp_count']}", flush=True)

    state = run_search(cfg, data or load_data(cfg), state, make_trainer(cfg), on_generation,
                       run_log)
    export_front(state.population, out / "front.csv")
    return state


def cmd_search(args):
    search(load_config(args), args.out)


def cmd_resume(args):
    state, cfg = read_checkpoint(latest_checkpoint(args.out))
    changes = {"workers": _workers(args, cfg)}
    if args.generations is not None:
        changes["n_gen"] = args.generations
    search(replace(cfg, **changes), args.out, state)


def cmd_baseline(args):
    cfg = load_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    atomic_write(args.out / "config.json", json.dumps(config_to_dict(cfg), indent=1).encode())
    run_log = RunLog(args.out / "run_log.jsonl")
    run_log.reset()
    front, evaluated = random_search_baseline(cfg, load_data(cfg), on_eval=run_log)
    export_front(front, args.out / "front.csv")
    print(f"baseline: {len(evaluated)} networks trained, front of {len(front)}")


def cmd_ablate(args):
    cfg = load_config(args)
    data = load_data(cfg)
    for name in ABLATIONS:
        variant = replace(cfg, ablations=Ablations(**{name: True}))
        print(f"== {name}", flush=True)
        search(variant, args.out / name, data=data)


def cmd_export(args):
    state, _ = read_checkpoint(latest_checkpoint(args.out))
    path = export_front(state.population, args.out / f"front.{args.format}", args.format)
    print(path)


COMMANDS = {"search": cmd_search, "resume": cmd_resume, "baseline": cmd_baseline,
            "ablate": cmd_ablate, "export": cmd_export}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (LemonadeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
