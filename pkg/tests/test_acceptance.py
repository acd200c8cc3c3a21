"""Acceptance criteria 1-12. Each test prints one PASS/FAIL line."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from dramlocker import isa
from dramlocker.analysis import (CHANNEL_COPY_FACTOR, DurationModelParams, account_latency,
                                 duration_sweep, estimate_defense_duration, overhead_report)
from dramlocker.attacks import (bfa_progressive, pta_attack, random_attack, random_hammer_trace,
                                run_trace)
from dramlocker.cli import main as cli_main
from dramlocker.config import ExperimentConfig
from dramlocker.dram import COPY_ERROR_PRESETS, DramConfig, DramState, RowAddress as R, Timing
from dramlocker.errors import InvalidPayload
from dramlocker.experiment import build_pta, build_trial, in_chance_band, run_traces
from dramlocker.locker import (SWAPPED, DefensePolicy, Idle, LockController, MemOp, Reservation,
                               TraceStats, build_lock_table)

ROOT = Path(__file__).resolve().parents[1]
N_TRACES = 1000
PINNED_BFA_FLIPS_TO_CHANCE = 3  # observed once on the undefended fixture; bound is 50


@pytest.fixture
def verdict(capsys, request):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail
    return report


def cfg_for(policy, err=0.0, **dram):
    return ExperimentConfig(dram=DramConfig.desk(copy_error_rate=err, **dram),
                            policy=DefensePolicy(policy))


@pytest.fixture(scope="module")
def traces():
    out = {}
    for policy in ("locktable", "none"):
        t0 = time.perf_counter()
        out[policy] = (run_traces(cfg_for(policy), 0, N_TRACES), time.perf_counter() - t0)
    return out


def test_01_ideal_invulnerability(traces, verdict, fixture_model, test_set):
    outcomes, secs = traces["locktable"]
    clean = build_trial(cfg_for("locktable"), 0).accuracy()
    flips = sum(o.flips_protected for o in outcomes)
    exact = all(o.accuracy == clean for o in outcomes)
    completing = sum(o.completing for o in outcomes)
    ok = len(outcomes) == N_TRACES and flips == 0 and exact and secs < 60 and completing > 0
    verdict(1, ok, f"{len(outcomes)} traces ({completing} threshold-reaching campaigns), "
                   f"protected flips={flips}, accuracy==clean({clean:.4f}) for all: {exact}, "
                   f"{secs:.1f}s")


def test_02_undefended_baseline(traces, verdict):
    outcomes, _ = traces["none"]
    completing = sum(o.completing for o in outcomes)
    missed = [o.index for o in outcomes if o.flipped_campaigns < o.completing]
    again = run_traces(cfg_for("none"), 0, 25)
    same = again == outcomes[:25]
    ok = not missed and completing > 0 and same
    verdict(2, ok, f"{completing} threshold-reaching campaigns, {len(missed)} without a flip, "
                   f"rerun identical: {same}")


def test_03_targeted_vs_random(verdict, test_set, attack_batch):
    t0 = time.perf_counter()
    t = build_trial(cfg_for("none"), 0)
    bfa = bfa_progressive(t.model, t.wmap, t.controller, 50, test_set, attack_batch)
    k = bfa.flips_to(0.2)
    # random needs more than 10k flips to reach chance unless one of these runs gets there first
    budget = 10 * k
    reached, accs_at_k = [], []
    for seed in range(20):
        tr = build_trial(cfg_for("none"), seed)
        rep = random_attack(tr.model, tr.wmap, tr.controller, budget, test_set, seed=seed)
        reached.append(rep.flips_to(0.2))
        accs_at_k.append(dict(rep.accuracy_curve)[k])
    p5 = float(np.percentile(accs_at_k, 5))
    secs = time.perf_counter() - t0
    ok = (k == PINNED_BFA_FLIPS_TO_CHANCE and all(r is None for r in reached)
          and p5 >= bfa.clean_accuracy - 0.15 and secs < 300)
    verdict(3, ok, f"BFA reaches chance after {k} flips; 0/20 random runs reach chance within "
                   f"{budget} flips (ratio <= 1/10 holds: {all(r is None for r in reached)}); "
                   f"random 5th-pct accuracy at {k} flips={p5:.4f}; {secs:.1f}s")


def test_04_table2_directional(verdict, test_set, attack_batch):
    t = build_trial(cfg_for("locktable"), 0)
    d = bfa_progressive(t.model, t.wmap, t.controller, 100, test_set, attack_batch,
                        stop_at_chance=False)
    u = build_trial(cfg_for("none"), 0)
    n = bfa_progressive(u.model, u.wmap, u.controller, 100, test_set, attack_batch,
                        stop_at_chance=False)
    ok = (d.flips_attempted == 100 and d.final_accuracy == d.clean_accuracy
          and d.flips_landed == 0 and in_chance_band(n.final_accuracy, 10))
    verdict(4, ok, f"defended {d.clean_accuracy:.4f} -> {d.final_accuracy:.4f} "
                   f"({d.flips_landed} landed); undefended -> {n.final_accuracy:.4f} "
                   f"(band [0, 0.2])")


def test_05_swap_error_calibration(verdict):
    n = 100_000
    lines, ok = [], True
    for name, p in COPY_ERROR_PRESETS.items():
        dram = DramState(DramConfig.desk(copy_error_rate=p))
        rng = np.random.default_rng(5)
        fails = sum(not dram.row_clone(R(0, 0, 0), R(0, 0, 1), rng).success for _ in range(n))
        sigma = math.sqrt(n * p * (1 - p))
        inside = abs(fails - n * p) <= 3 * sigma
        ok &= inside
        lines.append(f"{name} p={p}: {fails}/{n} (expected {n * p:.0f} +- {3 * sigma:.1f})")
    verdict(5, ok, "; ".join(lines))


def _relock_case(seed, counting):
    cfg = DramConfig(banks=1, subarrays_per_bank=4, rows_per_subarray=16, row_size=16, t_rh=50)
    locked_target = R(0, 1, 5)
    table = build_lock_table([locked_target], cfg)
    ctl = LockController(DramState(cfg), table, DefensePolicy(relock_counting=counting),
                         Reservation(cfg), seed=seed)
    locked = R(0, 1, 4)
    ctl.unlock(locked)
    home = table.entries[locked].current_home
    rng = np.random.default_rng(seed)
    plain = [R(0, 0, r) for r in range(12)]
    counted = 0
    while True:
        k = rng.integers(6)
        if k == 0:
            ctl.process(MemOp("act", plain[rng.integers(12)]))
        elif k == 1:
            ctl.process(MemOp("wr", locked, payload=bytes(16)))  # skipped
        elif k == 2:
            ctl.process(Idle(int(rng.integers(50))))
        else:
            row = home if counting == "per_row" else plain[rng.integers(12)]
            ctl.process(MemOp("rd", row, trusted=True))
            counted += 1
            state = table.entries[locked].state
            if counted < 1000 and state != SWAPPED:
                return False, counted
            if counted == 1000:
                return state != SWAPPED and ctl.stats.relocks == 1, counted


def test_06_relock_exactness(verdict):
    results = [_relock_case(seed, c) for seed in range(40) for c in ("global", "per_row")]
    ok = all(r for r, _ in results)
    verdict(6, ok, f"{sum(r for r, _ in results)}/{len(results)} random interleavings re-lock "
                   f"on exactly the 1000th executed R/W")


def test_07_isa_totality(verdict):
    t0 = time.perf_counter()
    good = rejected = bad = 0
    for w in range(1 << 16):
        try:
            ins = isa.decode(w)
        except InvalidPayload:
            rejected += 1
            continue
        if isa.encode(ins) == w:
            good += 1
        else:
            bad += 1
    secs = time.perf_counter() - t0
    ok = bad == 0 and good + rejected == 65536 and secs < 1.0
    verdict(7, ok, f"{good} words round-trip, {rejected} rejected, {bad} mismatches, {secs:.3f}s")


def test_08_overhead(verdict):
    rep = overhead_report(DramConfig())
    ok = (rep.sram_capacity_overhead == 57344 and rep.dram_capacity_overhead == 0
          and rep.max_entries == 14336 and rep.entry_bytes == 4 and rep.row() == "DRAM-Locker 0 +56KB")
    verdict(8, ok, f"{rep.row()}: SRAM {rep.sram_capacity_overhead} B, DRAM "
                   f"{rep.dram_capacity_overhead} B, {rep.max_entries} entries x {rep.entry_bytes} B")


def test_09_defense_duration(verdict):
    main = estimate_defense_duration(DurationModelParams("M1", 0.1, 1000, t_ref=64_000_000))
    by_trh = [e.log10_days for _, e in duration_sweep(DurationModelParams(), [500, 1000, 2000, 4000, 8000])]
    by_err = [e.log10_days for _, e in duration_sweep(DurationModelParams(), [1000],
                                                       [0.02, 0.05, 0.1, 0.2, 0.4])]
    mono = (all(a <= b for a, b in zip(by_trh, by_trh[1:]))
            and all(a >= b for a, b in zip(by_err, by_err[1:])))
    p = DurationModelParams("M1", 0.1, 4)
    analytic = estimate_defense_duration(p)
    mc = estimate_defense_duration(p, seed=0, method="montecarlo")
    lo, hi = mc.ci_log10_days
    contained = lo <= analytic.log10_days <= hi
    ok = main.days > 500 and mono and contained
    verdict(9, ok, f"M1 t_rh=1000 p=0.1: 10^{main.log10_days:.1f} days; monotone: {mono}; "
                   f"MC (t_rh=4) CI [{10 ** lo:.3g}, {10 ** hi:.3g}] days contains analytic "
                   f"{10 ** analytic.log10_days:.3g}")


def test_10_latency(verdict):
    timing = Timing()
    ctl = LockController(DramState(DramConfig.desk()), build_lock_table([R(0, 1, 5)], DramConfig.desk()),
                         DefensePolicy(), Reservation(DramConfig.desk()))
    out = ctl.unlock(R(0, 1, 4))
    per_swap = out.latency
    rng = np.random.default_rng(0)
    rows = [R(0, 1, r) for r in range(12)]
    stream = []
    for _ in range(2000):
        row = rows[rng.integers(12)]
        stream.append([MemOp("act", row), MemOp("rd", row, True),
                       MemOp("wr", row, True, bytes(256))][rng.integers(3)])
    additive = True
    for cut in rng.integers(0, len(stream), 5):
        c = LockController(DramState(DramConfig.desk()), build_lock_table([R(0, 1, 5)], DramConfig.desk()),
                           DefensePolicy(relock_window=50), Reservation(DramConfig.desk()))
        c.unlock(R(0, 1, 4))
        a = account_latency(c.run(stream[:cut]))
        b = account_latency(c.run(stream[cut:]))
        whole = account_latency(c.stats)
        unlock = account_latency(TraceStats(rowclones=3, swaps=1))  # the swap before the stream
        additive &= (a + unlock + b == whole
                     and whole.total_ns == c.stats.latency_ns)
    ok = (per_swap == 3 * timing.t_rowclone <= 300
          and CHANNEL_COPY_FACTOR * timing.t_rowclone == pytest.approx(11.6 * timing.t_rowclone)
          and additive)
    verdict(10, ok, f"swap={per_swap}ns (3 x {timing.t_rowclone}), channel copy="
                    f"{CHANNEL_COPY_FACTOR * timing.t_rowclone:.0f}ns, additivity on 5 random splits: "
                    f"{additive}")


def test_11_pta(verdict):
    finals = []
    for _ in range(2):
        s = build_pta(cfg_for("none"), 0)
        rep = pta_attack(s.page_table, s.controller, 3, 0)
        finals.append((rep.extra["original"], rep.extra["final"], rep.extra["redirected"]))
    redirect_ok = finals[0] == finals[1] and finals[0][2]
    identical = True
    attacks = 0
    for vpn in (0, 3, 15):
        for bit in range(32):
            s = build_pta(cfg_for("locktable"), vpn)
            before = s.page_table.raw_bytes()
            pta_attack(s.page_table, s.controller, vpn, bit)
            identical &= s.page_table.raw_bytes() == before
            attacks += 1
    for seed in range(20):
        s = build_pta(cfg_for("locktable"), seed)
        before = s.page_table.raw_bytes()
        tr = random_hammer_trace(s.controller.config, s.page_table.pte_rows,
                                 np.random.default_rng(seed), 2, reservation=s.controller.reservation)
        run_trace(tr, s.controller)
        identical &= s.page_table.raw_bytes() == before
        attacks += 1
    ok = redirect_ok and identical
    verdict(11, ok, f"undefended: {finals[0][0]} -> {finals[0][1]} on both runs; defended: PTE bytes "
                    f"identical after {attacks} attacks: {identical}")


def test_12_determinism(verdict, tmp_path, capsys):
    same = True
    compared = 0
    for cfg in ("bfa_defended.cfg", "bfa_undefended.cfg", "pta.cfg", "traces.cfg"):
        for run in ("a", "b"):
            rc = cli_main(["simulate", "--config", str(ROOT / "configs" / cfg), "--seed", "1",
                           "--out", str(tmp_path / run / cfg)])
            assert rc == 0
        capsys.readouterr()
        for f in sorted((tmp_path / "a" / cfg).iterdir()):
            same &= f.read_bytes() == (tmp_path / "b" / cfg / f.name).read_bytes()
            compared += 1
    verdict(12, same, f"{compared} artifacts from 4 configs run twice: byte-identical: {same}")
