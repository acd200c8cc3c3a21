#!/usr/bin/env python3
"""Defence-duration sweep over RowHammer threshold and per-copy error rate."""

import argparse
from pathlib import Path

from dramlocker.analysis import (DURATION_COLUMNS, DurationModelParams, duration_rows,
                                 duration_sweep, emit_report)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", choices=("M1", "M2"), default="M1")
    ap.add_argument("--unit", choices=("copy", "swap"), default="copy")
    ap.add_argument("--trh", type=int, nargs="+", default=[1000, 2000, 4800, 10000, 22400])
    ap.add_argument("--perr", type=float, nargs="+", default=[0.0014, 0.01, 0.05, 0.096, 0.2])
    ap.add_argument("--method", choices=("analytic", "montecarlo"), default="analytic")
    ap.add_argument("--out", type=Path, default=Path("out/duration_sweep.csv"))
    args = ap.parse_args()

    base = DurationModelParams(args.model, args.perr[0], args.trh[0], error_unit=args.unit)
    sweep = duration_sweep(base, args.trh, args.perr, args.method, seed=0)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    emit_report(duration_rows(sweep), args.out, DURATION_COLUMNS, "duration",
                meta={"model": args.model, "unit": args.unit, "method": args.method})
    for p, est in sweep:
        days = "unbounded" if est.unbounded else f"10^{est.log10_days:.2f}"
        print(f"{p.model_id} t_rh={p.t_rh:>6} p={p.per_copy_error:<7g} days={days}")


if __name__ == "__main__":
    main()
