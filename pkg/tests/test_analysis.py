import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dramlocker import analysis
from dramlocker.analysis import (CHANNEL_COPY_FACTOR, DurationModelParams, LatencyReport,
                                 account_latency, channel_copy_latency, duration_sweep,
                                 emit_report, estimate_defense_duration, m1_horizon_trials,
                                 overhead_report, swap_latency)
from dramlocker.dram import DramConfig, DramState, RowAddress as R, Timing
from dramlocker.errors import IoError
from dramlocker.locker import (DefensePolicy, Idle, LockController, LockTable, MemOp, Reservation,
                               TraceStats, build_lock_table)


def test_swap_and_channel_constants():
    t = Timing()
    assert swap_latency(t) == 270 <= 300
    assert channel_copy_latency(t) == pytest.approx(11.6 * 90)
    assert CHANNEL_COPY_FACTOR == 11.6 and analysis.CHANNEL_COPY_ENERGY_FACTOR == 74.4


def test_seven_swaps():
    rep = account_latency(TraceStats(rowclones=21, swaps=7))
    assert rep.rowclones == 7 * 270 and rep.total_ns == 1890


def test_empty_trace():
    rep = account_latency(TraceStats())
    assert rep.total_ns == 0 and rep.breakdown["skipped"] == 0


def _random_stream(seed, n=300):
    rng = np.random.default_rng(seed)
    rows = [R(0, 1, r) for r in range(12)]
    out = []
    for _ in range(n):
        k = rng.integers(5)
        row = rows[rng.integers(len(rows))]
        if k == 0:
            out.append(Idle(int(rng.integers(1000))))
        elif k == 1:
            out.append(MemOp("wr", row, True, bytes(256)))
        elif k == 2:
            out.append(MemOp("rd", row, True))
        else:
            out.append(MemOp("act", row))
    return out


def _controller(kind="locktable"):
    cfg = DramConfig.desk()
    dram = DramState(cfg)
    table = build_lock_table([R(0, 1, 5)], cfg)
    return LockController(dram, table, DefensePolicy(kind, relock_window=10), Reservation(cfg))


@given(st.integers(0, 10_000), st.integers(0, 300))
def test_latency_additivity_and_totals(seed, cut):
    stream = _random_stream(seed)
    ctl = _controller()
    ctl.unlock(R(0, 1, 4))
    before = ctl.stats.copy()
    s1 = ctl.run(stream[:cut])
    s2 = ctl.run(stream[cut:])
    whole = ctl.stats.since(before)
    a, b, w = account_latency(s1), account_latency(s2), account_latency(whole)
    assert a + b == w
    assert w.total_ns == sum(w.breakdown.values()) == whole.latency_ns
    assert w.rowclones == w.swaps * 3 * 90


def test_skipped_costs_only_lookup():
    ctl = _controller()
    st_ = ctl.run([MemOp("act", R(0, 1, 4))] * 10)
    rep = account_latency(st_)
    assert rep.total_ns == rep.lookups == 10 and rep.activates == 0


def test_duration_main_claim():
    est = estimate_defense_duration(DurationModelParams("M1", 0.1, 1000))
    assert est.days > 500 and est.log10_days > math.log10(500)
    assert not est.unbounded


def test_duration_zero_error_unbounded():
    for model in ("M1", "M2"):
        assert estimate_defense_duration(DurationModelParams(model, 0.0, 1000)).unbounded


def test_m2_exposure_cutoff():
    # exposure = 1000 x 60ns = 60us; t_rh x 45ns fits only up to t_rh = 1333
    assert not estimate_defense_duration(DurationModelParams("M2", 0.1, 1333)).unbounded
    assert estimate_defense_duration(DurationModelParams("M2", 0.1, 1334)).unbounded


def test_error_unit_interpretation():
    p = DurationModelParams("M1", 0.1, 10, error_unit="swap")
    assert p.copy_error == pytest.approx(1 - 0.9 ** (1 / 3))
    assert DurationModelParams("M2", 0.1).swap_error == pytest.approx(1 - 0.9 ** 3)


@pytest.mark.parametrize("model", ["M1", "M2"])
def test_monotone_sweep(model):
    sweep = duration_sweep(DurationModelParams(model), [250, 500, 1000, 2000, 4000], [0.1])
    days = [e.log10_days for _, e in sweep]
    assert all(a <= b for a, b in zip(days, days[1:]))
    sweep = duration_sweep(DurationModelParams(model, t_rh=1000), [1000], [0.01, 0.05, 0.1, 0.2, 0.4])
    days = [e.log10_days for _, e in sweep]
    assert all(a >= b for a, b in zip(days, days[1:]))


def test_exact_horizon():
    q = 1e-4
    n = m1_horizon_trials(q)
    assert 1 - (1 - q) ** n < 0.01 <= 1 - (1 - q) ** (n + 1)
    assert n == 100


@pytest.mark.parametrize("seed", range(3))
def test_montecarlo_ci_contains_analytic(seed):
    p = DurationModelParams("M1", 0.1, 4)  # q = 1e-4 per window
    a = estimate_defense_duration(p)
    m = estimate_defense_duration(p, seed=seed, method="montecarlo")
    lo, hi = m.ci_log10_days
    assert lo <= a.log10_days <= hi


def test_montecarlo_rejects_tiny_probability():
    with pytest.raises(ValueError):
        estimate_defense_duration(DurationModelParams(), method="montecarlo")


def test_overhead_default():
    rep = overhead_report(DramConfig())
    assert rep.sram_capacity_overhead == 57344 and rep.dram_capacity_overhead == 0
    assert rep.max_entries == 14336 and rep.entry_bytes == 4
    assert rep.row() == "DRAM-Locker 0 +56KB"
    assert rep.used_bytes == 0
    assert [r["framework"] for r in rep.rows()][-1] == "DRAM-Locker"


def test_emit_csv_and_jsonl(tmp_path):
    rows = [{"iteration": 1, "accuracy": 0.5, "policy": "none"}]
    cols = ("iteration", "accuracy", "policy")
    text = emit_report(rows, tmp_path / "a.csv", cols, "fig7", meta={"seed": 3, "config_sha256": "ab"})
    lines = text.splitlines()
    assert lines[0] == "# schema: dramlocker/fig7/v1" and "# seed: 3" in lines
    assert lines[-2:] == ["iteration,accuracy,policy", "1,0.5,none"]
    text = emit_report(rows, tmp_path / "a.jsonl", cols, "fig7", "jsonl", {"seed": 3})
    head, first = [json.loads(l) for l in text.splitlines()]
    assert head["schema"] == "dramlocker/fig7/v1" and first == rows[0]


def test_emit_empty_is_header_only(tmp_path):
    text = emit_report([], tmp_path / "e.csv", ("t_rh", "days"), "duration")
    assert text.splitlines()[-1] == "t_rh,days"
    assert (tmp_path / "e.csv").read_text() == text


def test_emit_unwritable(tmp_path):
    with pytest.raises(IoError):
        emit_report([], tmp_path / "missing" / "x.csv", ("a",), "x")
