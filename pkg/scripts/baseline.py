"""Random-search baseline with the training budget of a finished search run.

    python scripts/baseline.py --run runs/desk --out runs/desk_baseline
"""

import argparse
import json
from pathlib import Path

from lemonade.config import config_from_dict
from lemonade.pareto import hypervolume
from lemonade.runio import export_front, latest_checkpoint, read_checkpoint
from lemonade.search import load_data, random_search_baseline


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--run", type=Path, required=True, help="output directory of a search")
    p.add_argument("--out", type=Path, required=True)
    args = p.parse_args()
    state, _ = read_checkpoint(latest_checkpoint(args.run))
    cfg = config_from_dict(json.loads((args.run / "config.json").read_text()))
    front, evaluated = random_search_baseline(cfg, load_data(cfg), budget=state.f_exp_count)
    export_front(front, args.out / "front.csv")
    ref = cfg.reference_point
    print(f"trainings: search {state.f_exp_count}, baseline {len(evaluated)}")
    print(f"hypervolume: search {hypervolume([m.objectives.values for m in state.population], ref):.4f}, "
          f"baseline {hypervolume([m.objectives.values for m in front], ref):.4f}")


if __name__ == "__main__":
    main()
