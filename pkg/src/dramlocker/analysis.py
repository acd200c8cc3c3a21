"""Latency accounting, defence-duration models and overhead reporting."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .dram import DramConfig, Timing
from .errors import IoError
from .locker import DEFAULT_BUDGET, LockTable, TraceStats

# bulk copy of one row over the memory channel vs. in-DRAM RowClone
CHANNEL_COPY_FACTOR = 11.6
CHANNEL_COPY_ENERGY_FACTOR = 74.4
SUCCESS_TARGET = 0.99  # defended while P(targeted flip so far) < 1%
SCHEMA_VERSION = 1


# -- latency ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyReport:
    activates: int = 0
    accesses: int = 0
    rowclones: int = 0
    lookups: int = 0
    skipped: int = 0  # skipped instructions cost only their lookup
    swaps: int = 0

    @property
    def total_ns(self) -> int:
        return self.activates + self.accesses + self.rowclones + self.lookups + self.skipped

    @property
    def breakdown(self) -> dict:
        return {"activates": self.activates, "accesses": self.accesses,
                "rowclones": self.rowclones, "lookups": self.lookups, "skipped": self.skipped}

    def __add__(self, other: "LatencyReport") -> "LatencyReport":
        return LatencyReport(*(a + b for a, b in zip(self._values(), other._values())))

    def _values(self):
        return (self.activates, self.accesses, self.rowclones, self.lookups, self.skipped,
                self.swaps)


def account_latency(trace: TraceStats, timing: Timing = Timing(), lookup_ns: int = 1) -> LatencyReport:
    """Bill a trace's work by instruction class (idle gaps are not latency)."""
    return LatencyReport(
        activates=(trace.activates + trace.implicit_activates) * timing.t_act_pre,
        accesses=trace.reads * timing.t_rd + trace.writes * timing.t_wr,
        rowclones=trace.rowclones * timing.t_rowclone,
        lookups=trace.lookups * lookup_ns,
        skipped=0,
        swaps=trace.swaps,
    )


def swap_latency(timing: Timing = Timing()) -> int:
    return 3 * timing.t_rowclone


def channel_copy_latency(timing: Timing = Timing()) -> float:
    """Modelled latency of copying one row through the CPU instead of in DRAM."""
    return CHANNEL_COPY_FACTOR * timing.t_rowclone


# -- defence duration ---------------------------------------------------------------------

@dataclass(frozen=True)
class DurationModelParams:
    model_id: str = "M1"  # M1 consecutive errors | M2 exposure window
    per_copy_error: float = 0.1
    t_rh: int = 1000
    t_ref: int = 64_000_000
    unlock_rate: float = 1000.0  # unlock events per day (M2)
    relock_window: int = 1000
    error_unit: str = "copy"  # copy | swap: what per_copy_error is the probability of
    timing: Timing = field(default_factory=Timing)

    def __post_init__(self):
        if self.model_id not in ("M1", "M2"):
            raise ValueError(f"unknown duration model {self.model_id!r}")
        if not 0.0 <= self.per_copy_error <= 1.0:
            raise ValueError("per_copy_error must be in [0, 1]")
        if self.error_unit not in ("copy", "swap"):
            raise ValueError("error_unit must be 'copy' or 'swap'")
        if self.t_rh <= 0 or self.t_ref <= 0 or self.relock_window <= 0 or self.unlock_rate <= 0:
            raise ValueError("t_rh, t_ref, relock_window and unlock_rate must be > 0")

    @property
    def copy_error(self) -> float:
        p = self.per_copy_error
        return p if self.error_unit == "copy" else 1.0 - (1.0 - p) ** (1.0 / 3.0)

    @property
    def swap_error(self) -> float:
        p = self.per_copy_error
        return 1.0 - (1.0 - p) ** 3 if self.error_unit == "copy" else p

    @property
    def trials_per_day(self) -> float:
        if self.model_id == "M1":
            return 86_400e9 / self.t_ref
        return self.unlock_rate

    def log10_trial_failure(self) -> float:
        """log10 of the per-trial (window or unlock event) targeted-flip probability."""
        if self.model_id == "M1":
            p = self.copy_error
            return -math.inf if p == 0 else self.t_rh * math.log10(p)
        exposure = self.relock_window * (self.timing.t_act_pre + self.timing.t_rd)
        if exposure < self.t_rh * self.timing.t_act_pre or self.swap_error == 0:
            return -math.inf
        return math.log10(self.swap_error)


@dataclass(frozen=True)
class DurationEstimate:
    log10_days: float  # inf when unbounded
    method: str
    trials_per_day: float
    ci_log10_days: tuple = (math.nan, math.nan)
    horizon_trials: float = math.nan

    @property
    def unbounded(self) -> bool:
        return self.log10_days == math.inf

    @property
    def days(self) -> float:
        """Horizon in days; inf when unbounded or beyond float range (see log10_days)."""
        return math.inf if self.log10_days > 300 else 10.0 ** self.log10_days

    @property
    def ci_days(self) -> tuple:
        return tuple(math.inf if v > 300 else 10.0 ** v for v in self.ci_log10_days)


def _log10_horizon(log10_q: float) -> float:
    """log10 of the largest n with 1 - (1-q)^n < 1 - SUCCESS_TARGET (continuous)."""
    if log10_q == -math.inf:
        return math.inf
    budget = -math.log1p(-(1.0 - SUCCESS_TARGET))  # -ln(0.99)
    if log10_q < -15:
        rate = log10_q  # -ln(1-q) == q to double precision
        return math.log10(budget) - rate
    q = 10.0 ** log10_q
    if q >= 1.0 - SUCCESS_TARGET:
        return -math.inf
    return math.log10(budget) - math.log10(-math.log1p(-q))


def m1_horizon_trials(q: float) -> int:
    """Exact integer horizon: largest n with 1 - (1-q)^n < 1% (q a per-trial probability)."""
    if q >= 1.0 - SUCCESS_TARGET:
        return 0
    budget = -math.log1p(-(1.0 - SUCCESS_TARGET))
    n = math.floor(budget / -math.log1p(-q))
    while 1.0 - (1.0 - q) ** (n + 1) < 1.0 - SUCCESS_TARGET:
        n += 1
    while n > 0 and 1.0 - (1.0 - q) ** n >= 1.0 - SUCCESS_TARGET:
        n -= 1
    return n


def estimate_defense_duration(params: DurationModelParams, seed: int = 0,
                              method: str = "analytic", n_histories: int = 20000) -> DurationEstimate:
    """Time until the cumulative targeted-flip probability reaches 1%.

    ``analytic`` evaluates the geometric first-failure law in log space (the
    per-window probability p**t_rh underflows doubles). ``montecarlo`` samples
    per-trial Bernoulli failures for ``n_histories`` independent histories and
    reads the 1% quantile of the first-failure time, with a 95% interval from
    order statistics; it needs a per-trial probability above ~1e-12 to finish.
    """
    tpd = params.trials_per_day
    lq = params.log10_trial_failure()
    if method == "analytic":
        lh = _log10_horizon(lq)
        if lh < 15:  # small enough to count exactly
            n = float(m1_horizon_trials(10.0 ** lq))
            lh = math.log10(n) if n > 0 else -math.inf
        ld = lh - math.log10(tpd) if abs(lh) != math.inf else lh
        return DurationEstimate(ld, "analytic", tpd, (ld, ld), 10.0 ** lh if lh < 300 else math.inf)
    if method != "montecarlo":
        raise ValueError(f"unknown method {method!r}")
    if lq == -math.inf:
        return DurationEstimate(math.inf, "montecarlo", tpd, (math.inf, math.inf), math.inf)
    q = 10.0 ** lq
    if q < 1e-12:
        raise ValueError(f"per-trial failure {q:.3g} too small to sample; use the analytic route")
    rng = np.random.default_rng(seed)
    # first failure index of a Bernoulli(q) sequence is geometric on {1, 2, ...}
    first = np.sort(rng.geometric(q, size=n_histories))
    alpha = 1.0 - SUCCESS_TARGET
    k = math.ceil(alpha * n_histories)
    half = 1.96 * math.sqrt(n_histories * alpha * (1 - alpha))
    lo_k, hi_k = max(1, math.floor(k - half)), min(n_histories, math.ceil(k + half))
    # horizon = last trial before the alpha-quantile of first failure
    horizon = float(first[k - 1] - 1)
    lo, hi = float(first[lo_k - 1] - 1), float(first[hi_k - 1] - 1)

    def to_days(n):
        return math.log10(n / tpd) if n > 0 else -math.inf

    return DurationEstimate(to_days(horizon), "montecarlo", tpd, (to_days(lo), to_days(hi)), horizon)


def duration_sweep(base: DurationModelParams, t_rh_values=(), errors=(), method="analytic",
                   seed: int = 0) -> list[tuple[DurationModelParams, DurationEstimate]]:
    """Estimates over the cartesian product of t_rh values and error rates."""
    t_rh_values = tuple(t_rh_values) or (base.t_rh,)
    errors = tuple(errors) or (base.per_copy_error,)
    out = []
    for t in t_rh_values:
        for e in errors:
            p = replace(base, t_rh=int(t), per_copy_error=float(e))
            out.append((p, estimate_defense_duration(p, seed=seed, method=method)))
    return out


# -- overhead -------------------------------------------------------------------------------

# Other frameworks at the same 32GB/16-bank DDR4 configuration, as published
# (capacity markers: * DRAM, † SRAM, ‡ CAM; NR = not reported). Not modelled here.
REFERENCE_ROWS = (
    {"framework": "Graphene", "memory": "CAM-SRAM", "capacity": "0.53MB‡+1.12MB†", "area": "1 counter"},
    {"framework": "Hydra", "memory": "SRAM-DRAM", "capacity": "56KB†+4MB*", "area": "1 counter"},
    {"framework": "TWiCE", "memory": "SRAM-CAM", "capacity": "3.16MB†+1.6MB‡", "area": "1 counter"},
    {"framework": "Counter per Row", "memory": "DRAM", "capacity": "32MB*", "area": "16384 counters"},
    {"framework": "Counter Tree", "memory": "DRAM", "capacity": "2MB*", "area": "1024 counters"},
    {"framework": "RRS", "memory": "DRAM-SRAM", "capacity": "4MB*+NR†", "area": "NULL"},
    {"framework": "SRS", "memory": "DRAM-SRAM", "capacity": "1.26MB*+NR†", "area": "NULL"},
    {"framework": "SHADOW", "memory": "DRAM", "capacity": "0.16MB*", "area": "0.6%"},
    {"framework": "P-PIM", "memory": "DRAM", "capacity": "4.125MB*", "area": "0.34%"},
)
AREA_OVERHEAD = "0.02%"
OVERHEAD_COLUMNS = ("framework", "memory", "capacity", "area", "dram_bytes", "sram_bytes")


@dataclass(frozen=True)
class OverheadReport:
    dram_capacity_overhead: int
    sram_capacity_overhead: int
    max_entries: int
    used_bytes: int
    entry_bytes: int
    area: str = AREA_OVERHEAD
    reference_rows: tuple = REFERENCE_ROWS

    @staticmethod
    def _size(n: int) -> str:
        if n and n % (1 << 20) == 0:
            return f"{n >> 20}MB"
        if n and n % 1024 == 0:
            return f"{n >> 10}KB"
        return f"{n}" if n == 0 else f"{n}B"

    @property
    def capacity(self) -> str:
        """DRAM part, then the SRAM lock-table, e.g. ``0 +56KB``."""
        return f"{self._size(self.dram_capacity_overhead)} +{self._size(self.sram_capacity_overhead)}"

    def row(self) -> str:
        return f"DRAM-Locker {self.capacity}"

    def rows(self) -> list[dict]:
        mine = {"framework": "DRAM-Locker", "memory": "DRAM-SRAM", "capacity": self.capacity,
                "area": self.area, "dram_bytes": self.dram_capacity_overhead,
                "sram_bytes": self.sram_capacity_overhead}
        return [dict(r) for r in self.reference_rows] + [mine]


def overhead_report(config: DramConfig = DramConfig(), table: LockTable | None = None) -> OverheadReport:
    """Reserved swap rows are carved out of existing capacity, so only the SRAM
    lock-table is charged."""
    table = table if table is not None else LockTable(DEFAULT_BUDGET)
    return OverheadReport(0, table.capacity_bytes, table.max_entries, table.used_bytes,
                          table.entry_bytes)


# -- reports ----------------------------------------------------------------------------------

def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def render_report(rows, columns, kind: str, fmt: str = "csv", meta: dict | None = None) -> str:
    """Serialise ``rows`` (dicts) with a versioned header carrying ``meta``."""
    meta = dict(meta or {})
    head = {"schema": f"dramlocker/{kind}/v{SCHEMA_VERSION}", "columns": list(columns), **meta}
    if fmt == "csv":
        buf = io.StringIO()
        for k, v in head.items():
            buf.write(f"# {k}: {','.join(v) if isinstance(v, list) else v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
        return buf.getvalue()
    if fmt in ("jsonl", "json-lines"):
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps({c: r.get(c) for c in columns}, sort_keys=True) for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def atomic_write(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoError(f"cannot write {path}: {exc}") from exc


def emit_report(rows, path, columns, kind: str, fmt: str = "csv", meta: dict | None = None) -> str:
    text = render_report(list(rows), columns, kind, fmt, meta)
    atomic_write(path, text)
    return text


FIG7_COLUMNS = ("iteration", "accuracy", "policy", "flip_count", "denied", "time_ns")
DURATION_COLUMNS = ("model", "t_rh", "per_copy_error", "log10_days", "days", "unbounded")


def attack_rows(report) -> list[dict]:
    rows = [{"iteration": 0, "accuracy": report.clean_accuracy, "policy": report.policy,
             "flip_count": 0, "denied": 0, "time_ns": 0}]
    for rec in report.iterations:
        rows.append({"iteration": rec.iteration, "accuracy": rec.accuracy, "policy": report.policy,
                     "flip_count": rec.flips_landed, "denied": rec.denied, "time_ns": rec.time_ns})
    return rows


def duration_rows(sweep) -> list[dict]:
    return [{"model": p.model_id, "t_rh": p.t_rh, "per_copy_error": p.per_copy_error,
             "log10_days": est.log10_days, "days": est.days, "unbounded": est.unbounded}
            for p, est in sweep]
