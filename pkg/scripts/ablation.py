"""Search once per deactivated component and compare the final fronts.

    python scripts/ablation.py --out runs/ablation [--config configs/desk.yaml]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from lemonade.cli import search
from lemonade.config import Ablations, parse_config
from lemonade.pareto import hypervolume
from lemonade.search import load_data

VARIANTS = {"full": Ablations(), "no_anm": Ablations(no_anm=True),
            "no_lamarck": Ablations(no_lamarck=True), "no_kde": Ablations(no_kde=True)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=Path(__file__).parent.parent / "configs" /
                   "desk.yaml")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--generations", type=int)
    args = p.parse_args()
    cfg = parse_config(args.config.read_text())
    if args.generations is not None:
        cfg = replace(cfg, n_gen=args.generations)
    data = load_data(cfg)
    rows = []
    for name, abl in VARIANTS.items():
        print(f"== {name}", flush=True)
        state = search(replace(cfg, ablations=abl), args.out / name, data=data)
        vals = [m.objectives.values for m in state.population]
        best = min(v[0] for v in vals)
        rows.append((name, len(vals), best, hypervolume(vals, cfg.reference_point)))
    print(f"{'variant':<12}{'front':>6}{'best err':>10}{'hv':>10}")
    for name, size, best, hv in rows:
        print(f"{name:<12}{size:>6}{best:>10.4f}{hv:>10.4f}")


if __name__ == "__main__":
    main()
