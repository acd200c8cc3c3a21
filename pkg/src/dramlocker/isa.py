"""16-bit control ISA for in-DRAM swaps.

Word layout::

     15 14 13            7 6             0
    | op  |   a (7 bits)  |   b (7 bits)  |

    op 00  nop    a = b = 0
    op 01  copy   a = src uReg, b = dst uReg
    op 10  bnez   a = counter uReg, b = absolute jump target
    op 11  done   a = b = 0

uRegs are loaded out-of-band by the trusted controller; there is no
load-immediate instruction.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from typing import Union

from .dram import DramState, RowAddress
from .errors import (AssemblyError, DegenerateSwap, InvalidPayload, Nontermination,
                     TypeConfusion)

N_REGS = 128
MAX_PROGRAM = 128

OP_NOP, OP_COPY, OP_BNEZ, OP_DONE = 0b00, 0b01, 0b10, 0b11


def _check_field(name, value):
    if not isinstance(value, int) or not 0 <= value < N_REGS:
        raise ValueError(f"{name}={value!r} must be an integer in [0, {N_REGS})")


@dataclass(frozen=True)
class Copy:
    src: int
    dst: int

    def __post_init__(self):
        _check_field("src", self.src)
        _check_field("dst", self.dst)


@dataclass(frozen=True)
class Bnez:
    reg: int
    target: int

    def __post_init__(self):
        _check_field("reg", self.reg)
        _check_field("target", self.target)


@dataclass(frozen=True)
class Done:
    pass


@dataclass(frozen=True)
class Nop:
    pass


Instruction = Union[Copy, Bnez, Done, Nop]


def encode(instr: Instruction) -> int:
    if isinstance(instr, Copy):
        return (OP_COPY << 14) | (instr.src << 7) | instr.dst
    if isinstance(instr, Bnez):
        return (OP_BNEZ << 14) | (instr.reg << 7) | instr.target
    if isinstance(instr, Done):
        return OP_DONE << 14
    if isinstance(instr, Nop):
        return 0
    raise TypeError(f"not an instruction: {instr!r}")


def decode(word: int) -> Instruction:
    if not 0 <= word <= 0xFFFF:
        raise ValueError(f"word {word!r} is not 16-bit")
    op, a, b = word >> 14, (word >> 7) & 0x7F, word & 0x7F
    if op == OP_COPY:
        return Copy(a, b)
    if op == OP_BNEZ:
        return Bnez(a, b)
    if word & 0x3FFF:
        raise InvalidPayload(f"{'done' if op == OP_DONE else 'nop'} word 0x{word:04X} "
                             "has nonzero payload")
    return Done() if op == OP_DONE else Nop()


def assemble_swap(locked_reg: int, free_reg: int, buffer_reg: int) -> list[Copy]:
    """Lower SWAP(locked, free) into three row copies through the buffer row."""
    if len({locked_reg, free_reg, buffer_reg}) != 3:
        raise DegenerateSwap(f"swap registers must be distinct: "
                             f"{locked_reg}, {free_reg}, {buffer_reg}")
    return [Copy(locked_reg, buffer_reg), Copy(free_reg, locked_reg), Copy(buffer_reg, free_reg)]


# -- text / binary forms ---------------------------------------------------------

_REG = r"r(\d+)"
_LINE_PATTERNS = [
    (re.compile(rf"copy\s+{_REG}\s*,\s*{_REG}$"), lambda m: Copy(int(m[1]), int(m[2]))),
    (re.compile(rf"bnez\s+{_REG}\s*,\s*(\d+)$"), lambda m: Bnez(int(m[1]), int(m[2]))),
    (re.compile(r"done$"), lambda m: Done()),
    (re.compile(r"nop$"), lambda m: Nop()),
]


def format_instruction(instr: Instruction) -> str:
    if isinstance(instr, Copy):
        return f"copy r{instr.src}, r{instr.dst}"
    if isinstance(instr, Bnez):
        return f"bnez r{instr.reg}, {instr.target}"
    return "done" if isinstance(instr, Done) else "nop"


def parse_line(line: str) -> Instruction | None:
    text = line.split("#", 1)[0].strip().lower()
    if not text:
        return None
    for pattern, build in _LINE_PATTERNS:
        m = pattern.match(text)
        if m:
            try:
                return build(m)
            except ValueError as exc:
                raise AssemblyError(f"{line.strip()!r}: {exc}") from None
    raise AssemblyError(f"cannot parse instruction {line.strip()!r}")


def assemble_text(text: str) -> list[int]:
    words = []
    for lineno, line in enumerate(text.splitlines(), 1):
        try:
            instr = parse_line(line)
        except AssemblyError as exc:
            raise AssemblyError(f"line {lineno}: {exc}") from None
        if instr is not None:
            words.append(encode(instr))
    return words


def disassemble(words) -> str:
    return "".join(format_instruction(decode(w)) + "\n" for w in words)


def to_bytes(words) -> bytes:
    return struct.pack(f"<{len(words)}H", *words)


def from_bytes(blob: bytes) -> list[int]:
    if len(blob) % 2:
        raise AssemblyError(f"binary program has odd length {len(blob)}")
    return list(struct.unpack(f"<{len(blob) // 2}H", blob))


# -- execution ---------------------------------------------------------------------

@dataclass
class RegFile:
    """128 uRegs, each empty, a RowAddress, or a loop counter."""

    regs: list = field(default_factory=lambda: [None] * N_REGS)

    def __post_init__(self):
        if len(self.regs) != N_REGS:
            raise ValueError(f"register file must have {N_REGS} slots")

    @classmethod
    def load(cls, values: dict) -> "RegFile":
        rf = cls()
        for idx, val in values.items():
            rf[idx] = val
        return rf

    def __getitem__(self, idx):
        return self.regs[idx]

    def __setitem__(self, idx, value):
        _check_field("register", idx)
        self.regs[idx] = value


@dataclass
class ProgramStep:
    pc: int
    instr: Instruction
    latency: int = 0
    copy: tuple | None = None  # (src RowAddress, dst RowAddress, success)


@dataclass
class ProgramTrace:
    steps: list
    halted: bool
    lookups: int = 0

    @property
    def latency(self) -> int:
        return sum(s.latency for s in self.steps)

    @property
    def copies(self) -> list:
        return [s.copy for s in self.steps if s.copy is not None]


def execute_program(words, regs: RegFile, dram: DramState, rng, table=None,
                    step_budget: int = 4096) -> ProgramTrace:
    """Run a uReg program.

    Row copies come from the trusted sequencer: when a lock-table is given each
    copy is looked up (and counted) but never blocked.
    """
    words = list(words)
    if len(words) > MAX_PROGRAM:
        raise ValueError(f"program of {len(words)} words exceeds {MAX_PROGRAM}")
    program = [decode(w) for w in words]
    steps = []
    lookups = 0
    pc = 0
    for _ in range(step_budget):
        if not 0 <= pc < len(program):
            break
        instr = program[pc]
        step = ProgramStep(pc, instr)
        steps.append(step)
        if isinstance(instr, Done):
            return ProgramTrace(steps, True, lookups)
        if isinstance(instr, Copy):
            src, dst = regs[instr.src], regs[instr.dst]
            if not isinstance(src, RowAddress) or not isinstance(dst, RowAddress):
                raise TypeConfusion(f"copy operands r{instr.src}, r{instr.dst} must hold "
                                    "row addresses")
            lookups += table is not None
            res = dram.row_clone(src, dst, rng)
            step.latency = res.latency
            step.copy = (src, dst, res.success)
            pc += 1
        elif isinstance(instr, Bnez):
            val = regs[instr.reg]
            if isinstance(val, RowAddress) or not isinstance(val, int):
                raise TypeConfusion(f"bnez counter r{instr.reg} holds {val!r}, not a counter")
            regs[instr.reg] = val - 1
            pc = instr.target if val - 1 != 0 else pc + 1
        else:
            pc += 1
    raise Nontermination(f"no done reached within {step_budget} steps "
                         f"({len(program)}-word program)")
