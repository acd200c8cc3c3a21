"""Lock-table gating, SWAP orchestration and the re-lock policy.

The lock-table holds physical addresses of rows that must not be activated by
anyone: by default the immediate neighbours of every protected row, i.e. the
rows an attacker would hammer. Any RD/WR/ACT naming a locked address is
skipped. Legitimate use of a locked row's data goes through a SWAP (three
RowClone copies via the subarray's buffer row) that moves the data
to a reserved free row; the locked address stays denied. After
``relock_window`` executed R/W instructions the data is swapped back and the
entry returns to LOCKED.

A ``blindswap`` policy is included as a baseline: no gating, but every
candidate row is relocated to a random free row every ``blind_swap_period``
activations, whether or not anyone is hammering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import isa
from .dram import DramConfig, DramState, RowAddress
from .errors import (CapacityExceeded, DegenerateSwap, NotLocked, ResourceExhausted,
                     SubarrayMismatch, UntrustedCopy)

LOCKED = "LOCKED"
SWAPPED = "SWAPPED"

DEFAULT_BUDGET = 56 * 1024
DEFAULT_ENTRY_BYTES = 4


@dataclass
class LockEntry:
    state: str
    current_home: RowAddress
    rw_since_swap: int = 0


class LockTable:
    def __init__(self, capacity_bytes: int = DEFAULT_BUDGET, entry_bytes: int = DEFAULT_ENTRY_BYTES):
        if entry_bytes <= 0 or capacity_bytes < 0:
            raise ValueError("entry_bytes must be > 0 and capacity_bytes >= 0")
        self.capacity_bytes = capacity_bytes
        self.entry_bytes = entry_bytes
        self.entries: dict[RowAddress, LockEntry] = {}
        self.protected: tuple = ()
        self._homes: dict[RowAddress, RowAddress] = {}  # current_home -> locked address

    @property
    def max_entries(self) -> int:
        return self.capacity_bytes // self.entry_bytes

    @property
    def used_bytes(self) -> int:
        return len(self.entries) * self.entry_bytes

    def __len__(self):
        return len(self.entries)

    def __contains__(self, addr):
        return addr in self.entries

    def add(self, addr: RowAddress) -> None:
        if addr in self.entries:
            return
        if (len(self.entries) + 1) * self.entry_bytes > self.capacity_bytes:
            raise CapacityExceeded((len(self.entries) + 1) * self.entry_bytes, self.capacity_bytes)
        self.entries[addr] = LockEntry(LOCKED, addr)

    def owner_of_home(self, addr: RowAddress) -> Optional[RowAddress]:
        return self._homes.get(addr)

    def swapped(self) -> list[RowAddress]:
        return [a for a, e in self.entries.items() if e.state == SWAPPED]

    def mark_swapped(self, locked: RowAddress, home: RowAddress) -> None:
        entry = self.entries[locked]
        entry.state, entry.current_home, entry.rw_since_swap = SWAPPED, home, 0
        self._homes[home] = locked

    def mark_locked(self, locked: RowAddress) -> None:
        entry = self.entries[locked]
        self._homes.pop(entry.current_home, None)
        entry.state, entry.current_home, entry.rw_since_swap = LOCKED, locked, 0

    def dump(self) -> str:
        lines = []
        for addr in sorted(self.entries):
            e = self.entries[addr]
            lines.append(f"{addr} {e.state} {e.current_home} {e.rw_since_swap}\n")
        return "".join(lines)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dump())

    @classmethod
    def parse(cls, text: str, capacity_bytes=DEFAULT_BUDGET, entry_bytes=DEFAULT_ENTRY_BYTES):
        table = cls(capacity_bytes, entry_bytes)
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4 or parts[1] not in (LOCKED, SWAPPED):
                raise ValueError(f"line {lineno}: expected 'b:s:r STATE b:s:r count', got {line!r}")
            addr, home = RowAddress.parse(parts[0]), RowAddress.parse(parts[2])
            table.add(addr)
            if parts[1] == SWAPPED:
                table.mark_swapped(addr, home)
                table.entries[addr].rw_since_swap = int(parts[3])
            elif home != addr or int(parts[3]) != 0:
                raise ValueError(f"line {lineno}: LOCKED entry must be its own home with count 0")
        return table

    @classmethod
    def load(cls, path, **kw):
        with open(path) as fh:
            return cls.parse(fh.read(), **kw)


def build_lock_table(protected_rows, geometry: DramConfig, budget: int = DEFAULT_BUDGET,
                     entry_bytes: int = DEFAULT_ENTRY_BYTES, extra_rows=()) -> LockTable:
    """Lock every in-bounds neighbour of each protected row (plus ``extra_rows``)."""
    protected = [geometry.check(r) for r in protected_rows]
    wanted = set()
    for r in protected:
        wanted.update(geometry.neighbors(r))
    wanted.update(geometry.check(r) for r in extra_rows)
    required = len(wanted) * entry_bytes
    if required > budget:
        raise CapacityExceeded(required, budget)
    table = LockTable(budget, entry_bytes)
    for addr in sorted(wanted):
        table.add(addr)
    table.protected = tuple(sorted(set(protected)))
    return table


@dataclass(frozen=True)
class Reservation:
    """Per-subarray reserved rows: the last row is the buffer, the ``n_free`` rows
    below it form the free pool. Reserved rows never hold placed data."""

    config: DramConfig
    n_free: int = 2

    def __post_init__(self):
        if self.n_free < 1 or self.n_free + 1 >= self.config.rows_per_subarray:
            raise ValueError(f"n_free={self.n_free} does not fit a "
                             f"{self.config.rows_per_subarray}-row subarray")

    @property
    def first_reserved(self) -> int:
        return self.config.rows_per_subarray - 1 - self.n_free

    def buffer_row(self, addr: RowAddress) -> RowAddress:
        return RowAddress(addr.bank, addr.subarray, self.config.rows_per_subarray - 1)

    def free_rows(self, addr: RowAddress) -> list[RowAddress]:
        return [RowAddress(addr.bank, addr.subarray, r)
                for r in range(self.first_reserved, self.config.rows_per_subarray - 1)]

    def is_reserved(self, addr: RowAddress) -> bool:
        return addr.row >= self.first_reserved


@dataclass(frozen=True)
class DefensePolicy:
    kind: str = "locktable"  # none | locktable | blindswap
    blind_swap_period: Optional[int] = None
    lookup_ns: int = 1
    relock_window: int = 1000
    relock_counting: str = "global"  # global | per_row

    def __post_init__(self):
        if self.kind not in ("none", "locktable", "blindswap"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "blindswap" and not (self.blind_swap_period and self.blind_swap_period > 0):
            raise ValueError("blindswap needs blind_swap_period > 0")
        if self.relock_counting not in ("global", "per_row"):
            raise ValueError(f"relock_counting must be global or per_row")
        if self.relock_window <= 0 or self.lookup_ns < 0:
            raise ValueError("relock_window must be > 0 and lookup_ns >= 0")


# -- instruction stream ------------------------------------------------------------

@dataclass(frozen=True)
class MemOp:
    op: str  # act | rd | wr
    row: RowAddress
    trusted: bool = False
    payload: Optional[bytes] = None


@dataclass(frozen=True)
class RowCopy:
    """One step of a SWAP macro; only the trusted sequencer emits these."""

    src: RowAddress
    dst: RowAddress
    swap_of: RowAddress  # locked address (blind swaps: the candidate's logical address)
    step: int  # 1..3
    kind: str = "unlock"  # unlock | relock | blind
    trusted: bool = True


@dataclass(frozen=True)
class Idle:
    ns: int


@dataclass(frozen=True)
class GateDecision:
    verdict: str  # allow | allow_remapped | skip
    home: Optional[RowAddress] = None


ALLOW = GateDecision("allow")
SKIP = GateDecision("skip")


def gate(instr: MemOp, table: LockTable) -> GateDecision:
    entry = table.entries.get(instr.row)
    if entry is not None:
        return SKIP
    if instr.row in table._homes:
        return GateDecision("allow_remapped", instr.row)
    return ALLOW


@dataclass(frozen=True)
class SwapOutcome:
    success: bool
    copies: tuple
    latency: int


@dataclass
class StepResult:
    action: str  # executed | remapped | skipped | copy | idle
    latency: int
    flips: list = field(default_factory=list)
    data: Optional[bytes] = None


@dataclass
class TraceStats:
    activates: int = 0  # explicit ACT executed
    implicit_activates: int = 0  # ACT issued on behalf of RD/WR
    reads: int = 0
    writes: int = 0
    rowclones: int = 0
    lookups: int = 0
    skips: int = 0
    denied_activations: int = 0
    swaps: int = 0  # every 3-copy macro: unlock, relock or blind
    unlocks: int = 0
    relocks: int = 0
    blind_swaps: int = 0
    failed_swaps: int = 0
    flips_protected: int = 0
    flips_elsewhere: int = 0
    latency_ns: int = 0
    idle_ns: int = 0
    flip_events: list = field(default_factory=list)

    _COUNTERS = ("activates", "implicit_activates", "reads", "writes", "rowclones", "lookups",
                 "skips", "denied_activations", "swaps", "unlocks", "relocks", "blind_swaps",
                 "failed_swaps", "flips_protected", "flips_elsewhere", "latency_ns", "idle_ns")

    def __add__(self, other: "TraceStats") -> "TraceStats":
        out = TraceStats(**{k: getattr(self, k) + getattr(other, k) for k in self._COUNTERS})
        out.flip_events = self.flip_events + other.flip_events
        return out

    def copy(self) -> "TraceStats":
        out = TraceStats(**{k: getattr(self, k) for k in self._COUNTERS})
        out.flip_events = list(self.flip_events)
        return out

    def since(self, earlier: "TraceStats") -> "TraceStats":
        out = TraceStats(**{k: getattr(self, k) - getattr(earlier, k) for k in self._COUNTERS})
        out.flip_events = self.flip_events[len(earlier.flip_events):]
        return out


def swap_copies(locked: RowAddress, free: RowAddress, buffer: RowAddress,
                kind: str = "unlock") -> list[RowCopy]:
    """The SWAP macro lowered through the ISA: locked->buffer, free->locked, buffer->free."""
    regs = (locked, free, buffer)
    words = [isa.encode(i) for i in isa.assemble_swap(0, 1, 2)]
    out = []
    for step, word in enumerate(words, 1):
        ins = isa.decode(word)
        out.append(RowCopy(regs[ins.src], regs[ins.dst], locked, step, kind))
    return out


class LockController:
    """Memory-controller front end for one trial: gates, swaps, re-locks, keeps time."""

    def __init__(self, dram: DramState, table: LockTable | None = None,
                 policy: DefensePolicy | None = None, reservation: Reservation | None = None,
                 seed: int = 0, protected=None):
        self.dram = dram
        self.config = dram.config
        self.table = table if table is not None else LockTable()
        self.policy = policy or DefensePolicy()
        self.reservation = reservation or Reservation(dram.config)
        self.rng = np.random.default_rng(seed)
        self.protected = frozenset(protected if protected is not None else self.table.protected)
        self.now = dram.last_now
        self.stats = TraceStats()
        self._pending = None  # (swap_of, kind, [CopyResult])
        self._in_use: set = set()  # free rows currently holding swapped data
        self._logical: dict = {}  # blindswap: logical -> physical, only non-identity entries
        self._acts_since_blind = 0
        self.last_swap: Optional[SwapOutcome] = None
        if self.policy.kind == "blindswap":
            for cand in self.table.entries:
                self._check_pool(cand)

    # -- helpers ------------------------------------------------------------------------

    def _check_pool(self, addr):
        if self.reservation.is_reserved(addr):
            raise ValueError(f"row {addr} is reserved and cannot be locked or swapped")

    def physical(self, addr: RowAddress) -> RowAddress:
        return self._logical.get(addr, addr)

    def pick_free(self, locked: RowAddress, exclude=()) -> Optional[RowAddress]:
        pool = [r for r in self.reservation.free_rows(locked)
                if r not in self._in_use and r not in exclude]
        if not pool:
            return None
        return pool[int(self.rng.integers(len(pool)))]

    def advance(self, ns: int) -> None:
        self.now += ns
        self.stats.idle_ns += ns

    def advance_to_next_window(self) -> None:
        t_ref = self.config.t_ref
        self.advance((self.now // t_ref + 1) * t_ref - self.now)
        self.dram.refresh_tick(self.now)

    def _record_flips(self, flips, result_flips):
        for victim, bits in flips:
            if victim in self.protected:
                self.stats.flips_protected += 1
            else:
                self.stats.flips_elsewhere += 1
            self.stats.flip_events.append((victim, bits, self.now))
            result_flips.append((victim, bits))

    # -- execution ------------------------------------------------------------------------

    def process(self, instr) -> StepResult:
        if isinstance(instr, MemOp):
            return self._mem(instr)
        if isinstance(instr, RowCopy):
            if not instr.trusted:
                raise UntrustedCopy("row copies may only be issued by the trusted sequencer")
            return self._copy(instr)
        if isinstance(instr, Idle):
            self.advance(instr.ns)
            return StepResult("idle", 0)
        raise TypeError(f"cannot process {instr!r}")

    def _mem(self, instr: MemOp) -> StepResult:
        stats = self.stats
        kind = self.policy.kind
        latency = 0
        action = "executed"
        row = instr.row
        if kind == "locktable":
            self.config.check(row)
            latency = self.policy.lookup_ns
            stats.lookups += 1
            self.now += latency
            decision = gate(instr, self.table)
            if decision is SKIP:
                stats.skips += 1
                if instr.op == "act":
                    stats.denied_activations += 1
                stats.latency_ns += latency
                return StepResult("skipped", latency)
            if decision.verdict == "allow_remapped":
                action = "remapped"
        elif kind == "blindswap":
            row = self._logical.get(row, row)
        flips = []
        data = None
        dram = self.dram
        if instr.op == "act":
            out = dram.activate(row, self.now)
            stats.activates += 1
            n_acts = 1
            lat = out.latency
            raw_flips = out.flips_applied
        elif instr.op in ("rd", "wr"):
            out = dram.access(row, "read" if instr.op == "rd" else "write", instr.payload, self.now)
            n_acts = int(out.activated)
            stats.implicit_activates += n_acts
            if instr.op == "rd":
                stats.reads += 1
                data = out.data
            else:
                stats.writes += 1
            lat = out.latency
            raw_flips = out.flips_applied
        else:
            raise ValueError(f"unknown memory op {instr.op!r}")
        self.now += lat
        latency += lat
        stats.latency_ns += latency
        result = StepResult(action, latency, flips, data)
        if raw_flips:
            self._record_flips(raw_flips, flips)
        if instr.op != "act" and kind == "locktable":
            result.latency += self._count_rw(instr.row, result)
        if kind == "blindswap" and n_acts:
            self._acts_since_blind += n_acts
            if self._acts_since_blind >= self.policy.blind_swap_period:
                self._acts_since_blind = 0
                result.latency += self._blind_round()
        return result

    def _copy(self, rc: RowCopy) -> StepResult:
        if rc.step == 1:
            if self._pending is not None:
                raise RuntimeError("new SWAP started before the previous one finished")
            if not (rc.src.same_subarray(rc.dst)):
                raise SubarrayMismatch(f"swap rows {rc.src}, {rc.dst} span subarrays")
            self._pending = (rc.swap_of, rc.kind, [])
        elif self._pending is None or self._pending[0] != rc.swap_of or len(self._pending[2]) != rc.step - 1:
            raise RuntimeError(f"out-of-order SWAP step {rc.step} for {rc.swap_of}")
        res = self.dram.row_clone(rc.src, rc.dst, self.rng)
        self.now += res.latency
        self.stats.rowclones += 1
        self.stats.latency_ns += res.latency
        self._pending[2].append(res)
        if rc.step == 3:
            self._commit(rc)
        return StepResult("copy", res.latency)

    def _commit(self, last: RowCopy) -> None:
        swap_of, kind, results = self._pending
        self._pending = None
        ok = all(r.success for r in results)
        stats = self.stats
        stats.swaps += 1
        stats.failed_swaps += not ok
        self.last_swap = SwapOutcome(ok, tuple(results), sum(r.latency for r in results))
        home = last.dst  # step 3 writes the buffered data into the free row
        if kind == "unlock":
            stats.unlocks += 1
            if ok:
                self.table.mark_swapped(swap_of, home)
                self._in_use.add(home)
        elif kind == "relock":
            stats.relocks += 1
            # security first: the address is re-locked even if the copy-back failed
            self.table.mark_locked(swap_of)
            self._in_use.discard(home)
        elif kind == "blind":
            stats.blind_swaps += 1

    def _phys_owner(self, phys: RowAddress) -> RowAddress:
        for lg, ph in self._logical.items():
            if ph == phys:
                return lg
        return phys

    def _set_logical(self, logical, physical):
        if logical == physical:
            self._logical.pop(logical, None)
        else:
            self._logical[logical] = physical

    def _count_rw(self, addr: RowAddress, result: StepResult) -> int:
        swapped = self.table.swapped()
        if not swapped:
            return 0
        if self.policy.relock_counting == "global":
            due = []
            for locked in swapped:
                e = self.table.entries[locked]
                e.rw_since_swap += 1
                if e.rw_since_swap >= self.policy.relock_window:
                    due.append(locked)
        else:
            owner = self.table.owner_of_home(addr)
            due = []
            if owner is not None:
                e = self.table.entries[owner]
                e.rw_since_swap += 1
                if e.rw_since_swap >= self.policy.relock_window:
                    due.append(owner)
        latency = 0
        for locked in due:
            home = self.table.entries[locked].current_home
            for rc in swap_copies(locked, home, self.reservation.buffer_row(locked), "relock"):
                latency += self._copy(rc).latency
        return latency

    def _blind_round(self) -> int:
        latency = 0
        for cand in sorted(self.table.entries):
            phys = self._logical.get(cand, cand)
            slots = [self._logical.get(f, f) for f in self.reservation.free_rows(cand)]
            target = slots[int(self.rng.integers(len(slots)))]
            buffer = self.reservation.buffer_row(cand)
            copies = [RowCopy(phys, buffer, cand, 1, "blind"),
                      RowCopy(target, phys, cand, 2, "blind"),
                      RowCopy(buffer, target, cand, 3, "blind")]
            for rc in copies:
                latency += self._copy(rc).latency
            if self.last_swap.success:
                other = self._phys_owner(target)
                self._set_logical(cand, target)
                self._set_logical(other, phys)
        return latency

    # -- public operations --------------------------------------------------------------

    def swap(self, locked: RowAddress, free: RowAddress, buffer: RowAddress) -> SwapOutcome:
        entry = self.table.entries.get(locked)
        if entry is None or entry.state != LOCKED:
            raise NotLocked(f"{locked} is not a LOCKED lock-table entry")
        if free == locked or buffer in (locked, free):
            raise DegenerateSwap(f"swap rows must be distinct: {locked}, {free}, {buffer}")
        if not (locked.same_subarray(free) and locked.same_subarray(buffer)):
            raise SubarrayMismatch(f"swap triple {locked}, {free}, {buffer} spans subarrays")
        if free in self._in_use:
            raise ResourceExhausted(f"free row {free} already holds swapped data")
        for rc in swap_copies(locked, free, buffer):
            self._copy(rc)
        return self.last_swap

    def unlock(self, locked: RowAddress) -> SwapOutcome:
        free = self.pick_free(locked)
        if free is None:
            raise ResourceExhausted(f"no free row left in subarray of {locked}")
        return self.swap(locked, free, self.reservation.buffer_row(locked))

    def run(self, stream) -> TraceStats:
        before = self.stats.copy()
        for instr in stream:
            self.process(instr)
        return self.stats.since(before)


def process_instruction(controller: LockController, instr) -> StepResult:
    return controller.process(instr)


def run_sequence(program, controller: LockController) -> TraceStats:
    return controller.run(program)
