#!/usr/bin/env python3
"""Flips needed to reach chance accuracy: gradient-free BFA ranking vs random flips.

A random run that never reaches chance within its budget is reported as '>budget',
which makes the ratio an upper bound.
"""

import argparse

import numpy as np

from dramlocker import DefensePolicy
from dramlocker.attacks import bfa_progressive, random_attack
from dramlocker.config import ExperimentConfig
from dramlocker.dram import DramConfig
from dramlocker.experiment import build_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--random-seeds", type=int, default=20)
    ap.add_argument("--random-budget", type=int, default=None,
                    help="flips per random run (default: 10x the BFA count)")
    ap.add_argument("--threshold", type=float, default=0.2)
    args = ap.parse_args()

    cfg = ExperimentConfig(dram=DramConfig.desk(), policy=DefensePolicy("none"))
    t = build_trial(cfg, 0)
    bfa = bfa_progressive(t.model, t.wmap, t.controller, 50, t.test_set, t.attack_batch)
    k = bfa.flips_to(args.threshold)
    print(f"BFA: clean {bfa.clean_accuracy:.4f}, chance after {k} flips")
    budget = args.random_budget or 10 * (k or 50)

    reached, finals = [], []
    for seed in range(args.random_seeds):
        tr = build_trial(cfg, seed)
        rep = random_attack(tr.model, tr.wmap, tr.controller, budget, tr.test_set, seed=seed)
        reached.append(rep.flips_to(args.threshold))
        finals.append(rep.final_accuracy)
        shown = reached[-1] if reached[-1] is not None else f">{budget}"
        print(f"random seed {seed:2d}: final {rep.final_accuracy:.4f}, to chance {shown}")

    hits = [r for r in reached if r is not None]
    print(f"random runs reaching chance: {len(hits)}/{len(reached)}; "
          f"median final accuracy {np.median(finals):.4f}")
    if k and not hits:
        print(f"BFA/random flip ratio <= {k}/{budget} = {k / budget:.3f}")
    elif k:
        print(f"BFA/random flip ratio ~ {k}/{np.median(hits):.0f} (over runs that reached chance)")


if __name__ == "__main__":
    main()
