#!/usr/bin/env python3
"""Progressive BFA accuracy curves under every defence policy and copy-error preset.

Writes one CSV (iteration, accuracy, policy, ...) per setting into --out and prints
the final accuracy of each.
"""

import argparse
from pathlib import Path

from dramlocker import DefensePolicy
from dramlocker.analysis import FIG7_COLUMNS, attack_rows, emit_report
from dramlocker.config import ExperimentConfig
from dramlocker.dram import COPY_ERROR_PRESETS, DramConfig
from dramlocker.experiment import build_trial
from dramlocker.attacks import bfa_progressive


def settings(blind_periods):
    yield "none", DefensePolicy("none"), 0.0
    for period in blind_periods:
        yield f"blindswap{period}", DefensePolicy("blindswap", blind_swap_period=period), 0.0
    for name, p in COPY_ERROR_PRESETS.items():
        yield f"locktable_{name}", DefensePolicy("locktable"), p


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--blind-periods", type=int, nargs="+", default=[500, 5000],
                    help="activations between blind swaps")
    ap.add_argument("--out", type=Path, default=Path("out/bfa_curves"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    for tag, policy, err in settings(args.blind_periods):
        cfg = ExperimentConfig(dram=DramConfig.desk(copy_error_rate=err), policy=policy)
        trial = build_trial(cfg, args.seed)
        rep = bfa_progressive(trial.model, trial.wmap, trial.controller, args.iterations,
                              trial.test_set, trial.attack_batch, stop_at_chance=False)
        emit_report(attack_rows(rep), args.out / f"{tag}.csv", FIG7_COLUMNS, "attack-bfa",
                    meta={"seed": args.seed, "copy_error_rate": err, "setting": tag})
        print(f"{tag:>20}: clean {rep.clean_accuracy:.4f} -> final {rep.final_accuracy:.4f}"
              f"  landed {rep.flips_landed}/{rep.flips_attempted}  denied {rep.denied_activations}")


if __name__ == "__main__":
    main()
