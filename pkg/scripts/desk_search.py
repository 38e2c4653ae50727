"""Run the desk-scale search and print the end-to-end checks.

    python scripts/desk_search.py --out runs/desk [--config configs/desk.yaml]
"""

import argparse
import time
from pathlib import Path

from lemonade.cli import search
from lemonade.config import parse_config


def summarize(state, cpu_seconds):
    hist = state.history
    hv = [r["hypervolume"] for r in hist]
    params = [m.param_count for m in state.population]
    best = min(m.objectives.expensive[0] for m in state.population)
    print(f"hypervolume non-decreasing: {all(b >= a for a, b in zip(hv, hv[1:]))} "
          f"({hv[0]:.4f} -> {hv[-1]:.4f})")
    print(f"front: {len(params)} members, params {min(params)}..{max(params)} "
          f"({max(params) / min(params):.1f}x)")
    print(f"best error {best:.4f}, best initial {hist[0]['min_val_error']:.4f}")
    print(f"f_exp evaluations {state.f_exp_count}, CPU {cpu_seconds / 60:.1f} min")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path(__file__).parent.parent / "configs" /
                   "desk.yaml")
    p.add_argument("--out", type=Path, required=True)
    args = p.parse_args()
    cfg = parse_config(args.config.read_text())
    t0 = time.process_time()
    state = search(cfg, args.out)
    summarize(state, time.process_time() - t0)


if __name__ == "__main__":
    main()
