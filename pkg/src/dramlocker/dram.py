"""Row-level DRAM state machine.

Rows are stored sparsely so the full 32GB / 16-bank geometry can be
instantiated; untouched rows read back from the initial image (or zeros).

Refresh windows are aligned: window ``k`` covers ``[k * t_ref, (k+1) * t_ref)``.
An aggressor's activation count is local to the window it was issued in and
a victim's ``flip_mask`` is XORed into its data when an adjacent aggressor's
count reaches ``t_rh``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import AddressError, DegenerateCopy, SizeError, SubarrayMismatch

NS_PER_MS = 1_000_000

# Minimum activation counts that guarantee a flip, per DRAM generation.
# LPDDR4 (new) is reported as a range; the lower bound is the one an attacker needs.
T_RH_PRESETS = {
    "ddr3-old": (139_000, 139_000),
    "ddr3-new": (22_400, 22_400),
    "ddr4-old": (17_500, 17_500),
    "ddr4-new": (10_000, 10_000),
    "lpddr4-old": (16_800, 16_800),
    "lpddr4-new": (4_800, 9_000),
}

# Erroneous-SWAP fractions observed under +-0%, +-10%, +-20% process variation.
COPY_ERROR_PRESETS = {
    "pv0": 0.0,
    "pv10": 0.0014,
    "pv20": 0.096,
}


def t_rh_preset(name: str) -> int:
    try:
        lo, _hi = T_RH_PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown T_RH preset {name!r}; known: {sorted(T_RH_PRESETS)}") from None
    return lo


class RowAddress(NamedTuple):
    """(bank, subarray, row-within-subarray); tuple ordering is the total order."""

    bank: int
    subarray: int
    row: int

    def __str__(self):
        return f"{self.bank}:{self.subarray}:{self.row}"

    @classmethod
    def parse(cls, text: str) -> "RowAddress":
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"row address must be bank:subarray:row, got {text!r}")
        return cls(*(int(p) for p in parts))

    def same_subarray(self, other: "RowAddress") -> bool:
        return self.bank == other.bank and self.subarray == other.subarray


@dataclass(frozen=True)
class Timing:
    t_act_pre: int = 45
    t_rd: int = 15
    t_wr: int = 15
    t_rowclone: int = 90

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be > 0")


@dataclass(frozen=True)
class DramConfig:
    """Geometry, timing and disturbance parameters.

    Defaults are the 32GB, 16-bank DDR4 part used for overhead comparison:
    16 banks x 512 subarrays x 512 rows x 8KB rows = 2**22 rows.
    """

    banks: int = 16
    subarrays_per_bank: int = 512
    rows_per_subarray: int = 512
    row_size: int = 8192
    t_rh: int = 10_000
    t_ref: int = 64 * NS_PER_MS
    timing: Timing = field(default_factory=Timing)
    copy_error_rate: float = 0.0
    flip_once_per_window: bool = True

    def __post_init__(self):
        for name in ("banks", "subarrays_per_bank", "rows_per_subarray", "row_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.t_rh <= 0:
            raise ValueError("t_rh must be > 0")
        if self.t_ref <= 0:
            raise ValueError("t_ref must be > 0")
        if not 0.0 <= self.copy_error_rate <= 1.0:
            raise ValueError("copy_error_rate must be in [0, 1]")

    @classmethod
    def desk(cls, **overrides) -> "DramConfig":
        """Small geometry used by the attack experiments (1 bank, 16 x 64 rows of 256B)."""
        base = dict(banks=1, subarrays_per_bank=16, rows_per_subarray=64, row_size=256, t_rh=1000)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "DramConfig":
        return dataclasses.replace(self, **changes)

    @property
    def row_bits(self) -> int:
        return self.row_size * 8

    @property
    def total_rows(self) -> int:
        return self.banks * self.subarrays_per_bank * self.rows_per_subarray

    @property
    def capacity_bytes(self) -> int:
        return self.total_rows * self.row_size

    @property
    def address_bits(self) -> int:
        return max(1, (self.total_rows - 1).bit_length())

    def windows_per_day(self) -> float:
        return 86_400 * 1e9 / self.t_ref

    def check(self, addr: RowAddress) -> RowAddress:
        b, s, r = addr
        if not (0 <= b < self.banks and 0 <= s < self.subarrays_per_bank
                and 0 <= r < self.rows_per_subarray):
            raise AddressError(f"row {addr} outside geometry "
                               f"{self.banks}x{self.subarrays_per_bank}x{self.rows_per_subarray}")
        return addr

    def in_bounds(self, addr: RowAddress) -> bool:
        b, s, r = addr
        return (0 <= b < self.banks and 0 <= s < self.subarrays_per_bank
                and 0 <= r < self.rows_per_subarray)

    def neighbors(self, addr: RowAddress) -> list[RowAddress]:
        """Physically adjacent rows (+-1) within the same subarray."""
        b, s, r = addr
        out = []
        if r > 0:
            out.append(RowAddress(b, s, r - 1))
        if r + 1 < self.rows_per_subarray:
            out.append(RowAddress(b, s, r + 1))
        return out

    def flat(self, addr: RowAddress) -> int:
        b, s, r = self.check(addr)
        return (b * self.subarrays_per_bank + s) * self.rows_per_subarray + r

    def unflat(self, index: int) -> RowAddress:
        if not 0 <= index < self.total_rows:
            raise AddressError(f"flat row index {index} outside [0, {self.total_rows})")
        bs, r = divmod(index, self.rows_per_subarray)
        b, s = divmod(bs, self.subarrays_per_bank)
        return RowAddress(b, s, r)

    def subarrays(self):
        for b in range(self.banks):
            for s in range(self.subarrays_per_bank):
                yield b, s


@dataclass(frozen=True)
class CopyResult:
    success: bool
    latency: int


@dataclass(frozen=True)
class FlipEvent:
    victim: RowAddress
    aggressor: RowAddress
    bits: tuple
    time: int
    window: int


@dataclass
class ActivationOutcome:
    flips_applied: list  # [(RowAddress, bits)]
    latency: int


@dataclass
class AccessOutcome:
    data: Optional[bytes]
    latency: int
    activated: bool
    flips_applied: list


class DramState:
    """Mutable contents, counters and row buffers for one simulation trial."""

    def __init__(self, config: DramConfig, image: bytes | None = None,
                 flip_masks: dict | None = None):
        self.config = config
        self._image = bytes(image) if image else b""
        self._rows: dict[RowAddress, bytearray] = {}
        # aggressor -> [window, count]
        self._acts: dict[RowAddress, list] = {}
        # victim -> window in which its mask was last applied
        self._flipped: dict[RowAddress, int] = {}
        self.flip_masks: dict[RowAddress, tuple] = {}
        self.open_rows: dict[int, RowAddress] = {}
        self.flip_log: list[FlipEvent] = []
        self.last_now = 0
        for addr, bits in (flip_masks or {}).items():
            self.set_flip_mask(addr, bits)

    @classmethod
    def from_image_file(cls, config: DramConfig, path, **kw) -> "DramState":
        with open(path, "rb") as fh:
            image = fh.read()
        if len(image) > config.capacity_bytes:
            raise SizeError(f"image of {len(image)} bytes exceeds DRAM capacity")
        return cls(config, image=image, **kw)

    # -- contents -------------------------------------------------------------

    def _initial(self, addr: RowAddress) -> bytearray:
        rs = self.config.row_size
        start = self.config.flat(addr) * rs
        chunk = self._image[start:start + rs]
        return bytearray(chunk) + bytearray(rs - len(chunk))

    def _row(self, addr: RowAddress) -> bytearray:
        data = self._rows.get(addr)
        if data is None:
            self.config.check(addr)
            data = self._rows[addr] = self._initial(addr)
        return data

    def peek(self, addr: RowAddress) -> bytes:
        """Out-of-band read: no timing, no activation."""
        return bytes(self._row(addr))

    def poke(self, addr: RowAddress, offset: int, payload: bytes) -> None:
        """Out-of-band write used for initialization and trusted kernel updates."""
        row = self._row(addr)
        if offset < 0 or offset + len(payload) > len(row):
            raise SizeError(f"write of {len(payload)} bytes at offset {offset} overruns row")
        row[offset:offset + len(payload)] = payload

    def set_flip_mask(self, addr: RowAddress, bits) -> None:
        self.config.check(addr)
        bits = tuple(sorted(set(int(b) for b in bits)))
        if any(not 0 <= b < self.config.row_bits for b in bits):
            raise AddressError(f"flip mask bit outside row of {self.config.row_bits} bits")
        if bits:
            self.flip_masks[addr] = bits
        else:
            self.flip_masks.pop(addr, None)

    def clear_flip_mask(self, addr: RowAddress) -> None:
        self.flip_masks.pop(addr, None)

    # -- counters -------------------------------------------------------------

    def window_of(self, now: int) -> int:
        return now // self.config.t_ref

    def activations(self, addr: RowAddress, now: int | None = None) -> int:
        rec = self._acts.get(addr)
        if rec is None:
            return 0
        w = self.window_of(self.last_now if now is None else now)
        return rec[1] if rec[0] == w else 0

    def _advance(self, now: int) -> None:
        if now < self.last_now:
            raise ValueError(f"time went backwards: {now} < {self.last_now}")
        self.last_now = now

    # -- commands ---------------------------------------------------------------

    def activate(self, row: RowAddress, now: int) -> ActivationOutcome:
        cfg = self.config
        cfg.check(row)
        self._advance(now)
        w = now // cfg.t_ref
        rec = self._acts.get(row)
        if rec is None or rec[0] != w:
            rec = self._acts[row] = [w, 0]
        rec[1] += 1
        self.open_rows[row.bank] = row
        count = rec[1]
        flips = []
        if count == cfg.t_rh or (not cfg.flip_once_per_window and count % cfg.t_rh == 0):
            for victim in cfg.neighbors(row):
                bits = self.flip_masks.get(victim)
                if not bits:
                    continue
                if cfg.flip_once_per_window and self._flipped.get(victim) == w:
                    continue
                data = self._row(victim)
                for b in bits:
                    data[b >> 3] ^= 1 << (b & 7)
                self._flipped[victim] = w
                flips.append((victim, bits))
                self.flip_log.append(FlipEvent(victim, row, bits, now, w))
        return ActivationOutcome(flips, cfg.timing.t_act_pre)

    def access(self, row: RowAddress, op: str, payload: bytes | None = None,
               now: int = 0) -> AccessOutcome:
        cfg = self.config
        cfg.check(row)
        if op == "write":
            if payload is None or len(payload) != cfg.row_size:
                got = None if payload is None else len(payload)
                raise SizeError(f"write payload must be {cfg.row_size} bytes, got {got}")
        elif op != "read":
            raise ValueError(f"access op must be 'read' or 'write', got {op!r}")
        latency = 0
        flips = []
        activated = self.open_rows.get(row.bank) != row
        if activated:
            out = self.activate(row, now)
            latency += out.latency
            flips = out.flips_applied
        else:
            self._advance(now)
        if op == "read":
            return AccessOutcome(bytes(self._row(row)), latency + cfg.timing.t_rd, activated, flips)
        self._row(row)[:] = payload
        return AccessOutcome(None, latency + cfg.timing.t_wr, activated, flips)

    def row_clone(self, src: RowAddress, dst: RowAddress, rng: np.random.Generator) -> CopyResult:
        cfg = self.config
        cfg.check(src)
        cfg.check(dst)
        if not src.same_subarray(dst):
            raise SubarrayMismatch(f"RowClone needs one subarray: {src} -> {dst}")
        if src == dst:
            raise DegenerateCopy(f"RowClone source and destination are both {src}")
        # one draw per copy regardless of rate keeps RNG streams aligned across configs
        ok = rng.random() >= cfg.copy_error_rate
        if ok:
            self._row(dst)[:] = self._row(src)
        self.open_rows.pop(src.bank, None)
        return CopyResult(ok, cfg.timing.t_rowclone)

    def refresh_tick(self, now: int) -> int:
        """Reset counters of rows whose window has ended; returns how many were reset."""
        self._advance(now)
        w = now // self.config.t_ref
        stale = [a for a, (aw, c) in self._acts.items() if aw < w and c > 0]
        for a in stale:
            del self._acts[a]
        for v in [v for v, fw in self._flipped.items() if fw < w]:
            del self._flipped[v]
        return len(stale)
