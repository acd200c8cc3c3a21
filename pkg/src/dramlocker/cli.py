"""Command-line entry point: ``dramlocker <subcommand> ...``.

Exit status: 0 success, 1 runtime failure (names the trial), 2 invalid input.
Output directory: ``--out``, else ``[run] out``, else $DRAMLOCKER_OUT, else ./out.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, analysis, isa
from .config import ExperimentConfig, load_config
from .dram import DramConfig
from .errors import AssemblyError, ConfigError, DramLockerError, InvalidPayload
from .locker import LockTable
from .experiment import (LATENCY_COLUMNS, PTA_COLUMNS, TRACE_COLUMNS, build_trial, duration_params,
                         latency_rows, pta_rows, run_attack, run_pta, run_traces, trace_rows)

log = logging.getLogger("dramlocker")
ENV_OUT = "DRAMLOCKER_OUT"


class UsageError(Exception):
    """Bad input detected after argument parsing (exit 2)."""


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, policy=args.policy, preset=args.preset, out=args.out)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.out or Path(os.environ.get(ENV_OUT) or "out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise analysis.IoError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _meta(cfg: ExperimentConfig, seed=None) -> dict:
    meta = {"config_sha256": cfg.source_hash or "defaults", "policy": cfg.policy.kind,
            "t_rh": cfg.dram.t_rh, "copy_error_rate": cfg.dram.copy_error_rate}
    if seed is not None:
        meta["seed"] = seed
    return meta


def _ext(cfg):
    return "csv" if cfg.format == "csv" else "jsonl"


def _run_trial(cfg: ExperimentConfig, seed: int, out: Path) -> str:
    kind = cfg.attack.kind
    tag = f"{kind}_{cfg.policy.kind}_seed{seed}"
    path = out / f"{tag}.{_ext(cfg)}"
    if kind in ("bfa", "random"):
        trial = build_trial(cfg, seed)
        report = run_attack(trial)
        analysis.emit_report(analysis.attack_rows(report), path, analysis.FIG7_COLUMNS,
                             f"attack-{kind}", cfg.format, _meta(cfg, seed))
        lat = analysis.account_latency(trial.controller.stats, cfg.dram.timing, cfg.policy.lookup_ns)
        analysis.emit_report(latency_rows(lat), out / f"latency_{tag}.{_ext(cfg)}", LATENCY_COLUMNS,
                             "latency", cfg.format, _meta(cfg, seed))
        return (f"{tag}: clean={report.clean_accuracy:.4f} final={report.final_accuracy:.4f} "
                f"landed={report.flips_landed}/{report.flips_attempted} "
                f"denied={report.denied_activations}")
    if kind == "pta":
        report = run_pta(cfg, seed)
        analysis.emit_report(pta_rows(report), path, PTA_COLUMNS, "pta", cfg.format, _meta(cfg, seed))
        x = report.extra
        return (f"{tag}: vpn={x['vpn']} bit={x['bit']} {x['original']} -> {x['final']} "
                f"redirected={x['redirected']} denied={report.denied_activations}")
    outcomes = run_traces(cfg, seed)
    analysis.emit_report(trace_rows(outcomes), path, TRACE_COLUMNS, "trace", cfg.format,
                         _meta(cfg, seed))
    return (f"{tag}: traces={len(outcomes)} protected_flips={sum(o.flips_protected for o in outcomes)} "
            f"denied={sum(o.denied for o in outcomes)}")


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.kind:
        cfg = replace(cfg, attack=replace(cfg.attack, kind=args.kind))
    if args.budget is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, budget=args.budget))
    out = _out_dir(cfg)
    summaries = []
    for seed in cfg.seeds:
        try:
            summaries.append(_run_trial(cfg, seed, out))
        except (DramLockerError, ValueError, RuntimeError) as exc:
            print(f"error: trial seed={seed} ({cfg.attack.kind}, {cfg.policy.kind}): {exc}",
                  file=sys.stderr)
            return 1
    rep = analysis.overhead_report(cfg.dram)
    analysis.emit_report(rep.rows(), out / f"overhead.{_ext(cfg)}", analysis.OVERHEAD_COLUMNS,
                         "overhead", cfg.format, _meta(cfg))
    base, t_rhs, errs = duration_params(cfg)
    sweep = analysis.duration_sweep(base, t_rhs, errs, cfg.duration.method, seed=cfg.seeds[0])
    analysis.emit_report(analysis.duration_rows(sweep), out / f"duration.{_ext(cfg)}",
                         analysis.DURATION_COLUMNS, "duration", cfg.format, _meta(cfg))
    for line in summaries:
        print(line)
    return 0


def _fmt_days(est) -> str:
    if est.unbounded:
        return "unbounded"
    if est.log10_days == -math.inf:
        return "0"
    if est.log10_days > 12:
        return f"1e{est.log10_days:.2f}"
    return f"{est.days:.6g}"


def cmd_duration(args) -> int:
    cfg = _config(args)
    base, t_rhs, errs = duration_params(cfg)
    try:
        if args.model:
            base = replace(base, model_id=args.model)
        if args.unit:
            base = replace(base, error_unit=args.unit)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    t_rhs = tuple(args.trh) if args.trh else t_rhs
    errs = tuple(args.perr) if args.perr else errs
    method = args.method or cfg.duration.method
    try:
        sweep = analysis.duration_sweep(base, t_rhs, errs, method, seed=(args.seed or 0))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print("model t_rh per_copy_error days log10_days")
    for p, est in sweep:
        print(f"{p.model_id} {p.t_rh} {p.per_copy_error:g} {_fmt_days(est)} {est.log10_days:.4f}")
    if args.out or cfg.out:
        out = _out_dir(cfg)
        analysis.emit_report(analysis.duration_rows(sweep), out / f"duration.{_ext(cfg)}",
                             analysis.DURATION_COLUMNS, "duration", cfg.format, _meta(cfg))
    return 0


def cmd_overhead(args) -> int:
    cfg = _config(args)
    dram = cfg.dram if args.config else DramConfig()
    rep = analysis.overhead_report(dram, LockTable(cfg.lock_budget_bytes, cfg.entry_bytes))
    print("framework capacity | memory | area")
    for row in rep.rows():
        print(f"{row['framework']} {row['capacity']} | {row['memory']} | {row['area']}")
    print(f"# lock-table: {rep.max_entries} entries x {rep.entry_bytes} bytes, "
          f"used {rep.used_bytes} bytes")
    return 0


def _read_input(path, binary: bool):
    if path in (None, "-"):
        return sys.stdin.buffer.read() if binary else sys.stdin.read()
    p = Path(path)
    try:
        return p.read_bytes() if binary else p.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {p}: {exc.strerror or exc}") from None


def cmd_asm(args) -> int:
    text = _read_input(args.input, binary=False)
    try:
        words = isa.assemble_text(text)
    except AssemblyError as exc:
        raise UsageError(str(exc)) from None
    blob = isa.to_bytes(words)
    if args.output:
        analysis.atomic_write_bytes(args.output, blob)
    else:
        sys.stdout.buffer.write(blob)
        sys.stdout.flush()
    return 0


def cmd_disasm(args) -> int:
    blob = _read_input(args.input, binary=True)
    try:
        text = isa.disassemble(isa.from_bytes(blob))
    except (AssemblyError, InvalidPayload) as exc:
        raise UsageError(str(exc)) from None
    if args.output:
        analysis.atomic_write(args.output, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (INI)")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--policy", choices=("none", "locktable", "blindswap"))
    common.add_argument("--preset", help="T_RH preset, e.g. ddr4-new")

    ap = argparse.ArgumentParser(prog="dramlocker", description="Lock-table RowHammer defence simulator")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    for name in ("simulate", "run", "attack"):
        p = sub.add_parser(name, parents=[common],
                           help="run the configured experiment" if name != "attack"
                           else "run one attack scenario")
        p.add_argument("--kind", choices=("bfa", "random", "pta", "trace"))
        p.add_argument("--budget", type=int)
        p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("duration", parents=[common], help="defence-duration estimates")
    p.add_argument("--model", choices=("M1", "M2"))
    p.add_argument("--trh", type=int, nargs="+")
    p.add_argument("--perr", type=float, nargs="+")
    p.add_argument("--unit", choices=("copy", "swap"), help="what the error rate applies to")
    p.add_argument("--method", choices=("analytic", "montecarlo"))
    p.set_defaults(func=cmd_duration)

    p = sub.add_parser("overhead", parents=[common], help="capacity overhead table")
    p.set_defaults(func=cmd_overhead)

    p = sub.add_parser("asm", help="assemble ISA text to little-endian 16-bit words")
    p.add_argument("input", nargs="?", default="-")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("disasm", help="disassemble a binary program")
    p.add_argument("input", nargs="?", default="-")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_disasm)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DramLockerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
