#!/usr/bin/env python3
"""Latency cost of the lock-table: per-swap figures plus a breakdown of one defended BFA run."""

import argparse

from dramlocker import DefensePolicy
from dramlocker.analysis import account_latency, channel_copy_latency, swap_latency
from dramlocker.attacks import bfa_progressive
from dramlocker.config import ExperimentConfig
from dramlocker.dram import DramConfig, Timing
from dramlocker.experiment import build_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=20)
    args = ap.parse_args()

    timing = Timing()
    print(f"in-DRAM swap (3 RowClones): {swap_latency(timing)} ns")
    print(f"same swap over the channel:  {3 * channel_copy_latency(timing):.0f} ns")

    for kind in ("none", "locktable"):
        cfg = ExperimentConfig(dram=DramConfig.desk(), policy=DefensePolicy(kind))
        t = build_trial(cfg, 0)
        if kind == "locktable":
            t.controller.unlock(sorted(t.controller.table.entries)[0])  # one legitimate unlock
        bfa_progressive(t.model, t.wmap, t.controller, args.iterations, t.test_set,
                        t.attack_batch, stop_at_chance=False)
        rep = account_latency(t.controller.stats, timing)
        parts = ", ".join(f"{k}={v}" for k, v in rep.breakdown.items())
        print(f"{kind:>9}: total {rep.total_ns} ns ({parts})")


if __name__ == "__main__":
    main()
