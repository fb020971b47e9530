"""Overestimation gap of the greedy policy under exposure-biased logs, sweeping the penalty weight.

The gap is mean max-Q on visited states minus the realised discounted return,
both in reward-scale units.  Smaller is more conservative.
"""
import argparse
import dataclasses

import numpy as np

from landing_nav.pipeline.config import load_config
from landing_nav.pipeline.experiment import overestimation_gap


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--alphas", default="0,0.3,1,3")
    ap.add_argument("--N", type=int, default=2000)
    a = ap.parse_args()
    cfg = load_config(a.config)
    cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, N=a.N))
    alphas = [float(x) for x in a.alphas.split(",")]
    print(f"{'seed':>4} " + " ".join(f"{'a=' + str(x):>16}" for x in alphas))
    gaps = np.zeros((a.seeds, len(alphas)))
    for s in range(a.seeds):
        for j, alpha in enumerate(alphas):
            r = overestimation_gap(cfg, alpha, s)
            gaps[s, j] = r.gap
        print(f"{s:>4} " + " ".join(f"{g:>16.3f}" for g in gaps[s]))
    print(f"{'mean':>4} " + " ".join(f"{g:>16.3f}" for g in gaps.mean(axis=0)))


if __name__ == "__main__":
    main()
