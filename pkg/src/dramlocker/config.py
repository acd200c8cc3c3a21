"""Experiment configuration: an INI file with a fixed schema.

Sections and keys (all optional unless noted; unknown keys are errors)::

    [dram]      preset = desk | default, t_rh, t_rh_preset = ddr4-new | ...,
                banks, subarrays_per_bank, rows_per_subarray, row_size,
                t_ref_ms, t_act_pre, t_rd, t_wr, t_rowclone,
                copy_error_rate, copy_error_preset = pv0 | pv10 | pv20,
                flip_once_per_window
    [flip_mask] <bank:subarray:row> = comma-separated bit offsets
    [policy]    kind = none | locktable | blindswap, blind_swap_period,
                lookup_ns, relock_window, relock_counting = global | per_row,
                n_free, lock_budget_bytes, entry_bytes
    [victim]    model, dataset, attack_dataset (paths; default: bundled fixture),
                placement = scatter | sequential, placement_seed, attack_batch
    [attack]    kind = bfa | random | pta | trace, budget, double_sided,
                stop_at_chance, traces, campaigns, pta_vpn, pta_bit
    [duration]  model = M1 | M2, t_rh (list), per_copy_error (list), t_ref_ms,
                unlock_rate, relock_window, error_unit = copy | swap,
                method = analytic | montecarlo
    [run]       seeds (list, required non-empty), out, format = csv | jsonl

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .dram import COPY_ERROR_PRESETS, NS_PER_MS, DramConfig, RowAddress, Timing, t_rh_preset
from .errors import ConfigError
from .locker import DEFAULT_BUDGET, DEFAULT_ENTRY_BYTES, DefensePolicy

SCHEMA = {
    "dram": {"preset", "t_rh", "t_rh_preset", "banks", "subarrays_per_bank", "rows_per_subarray",
             "row_size", "t_ref_ms", "t_act_pre", "t_rd", "t_wr", "t_rowclone",
             "copy_error_rate", "copy_error_preset", "flip_once_per_window"},
    "flip_mask": None,  # free-form row keys
    "policy": {"kind", "blind_swap_period", "lookup_ns", "relock_window", "relock_counting",
               "n_free", "lock_budget_bytes", "entry_bytes"},
    "victim": {"model", "dataset", "attack_dataset", "placement", "placement_seed", "attack_batch"},
    "attack": {"kind", "budget", "double_sided", "stop_at_chance", "traces", "campaigns",
               "pta_vpn", "pta_bit"},
    "duration": {"model", "t_rh", "per_copy_error", "t_ref_ms", "unlock_rate", "relock_window",
                 "error_unit", "method"},
    "run": {"seeds", "out", "format"},
}


@dataclass(frozen=True)
class VictimSpec:
    model: Optional[Path] = None  # None: bundled fixture
    dataset: Optional[Path] = None
    attack_dataset: Optional[Path] = None
    placement: str = "scatter"
    placement_seed: int = 0
    attack_batch: int = 128


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "bfa"
    budget: int = 100
    double_sided: bool = True
    stop_at_chance: bool = False
    traces: int = 10
    campaigns: int = 2
    pta_vpn: int = 3
    pta_bit: int = 0


@dataclass(frozen=True)
class DurationSpec:
    model: str = "M1"
    t_rh: tuple = (1000,)
    per_copy_error: tuple = (0.1,)
    t_ref_ms: float = 64.0
    unlock_rate: float = 1000.0
    relock_window: int = 1000
    error_unit: str = "copy"
    method: str = "analytic"


@dataclass(frozen=True)
class ExperimentConfig:
    dram: DramConfig = field(default_factory=DramConfig.desk)
    flip_masks: dict = field(default_factory=dict)
    policy: DefensePolicy = field(default_factory=DefensePolicy)
    n_free: int = 2
    lock_budget_bytes: int = DEFAULT_BUDGET
    entry_bytes: int = DEFAULT_ENTRY_BYTES
    victim: VictimSpec = field(default_factory=VictimSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    duration: DurationSpec = field(default_factory=DurationSpec)
    seeds: tuple = (0,)
    out: Optional[Path] = None
    format: str = "csv"
    source_hash: str = ""

    def with_overrides(self, seed=None, policy=None, preset=None, out=None) -> "ExperimentConfig":
        cfg = self
        tag = []
        if seed is not None:
            cfg = replace(cfg, seeds=(int(seed),))
            tag.append(f"seed={seed}")
        if policy is not None:
            try:
                cfg = replace(cfg, policy=replace(cfg.policy, kind=policy))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            tag.append(f"policy={policy}")
        if preset is not None:
            cfg = replace(cfg, dram=cfg.dram.replace(t_rh=_preset(preset)))
            tag.append(f"preset={preset}")
        if out is not None:
            cfg = replace(cfg, out=Path(out))
        if tag:
            h = hashlib.sha256((cfg.source_hash + "|" + "|".join(tag)).encode()).hexdigest()
            cfg = replace(cfg, source_hash=h)
        return cfg


def _preset(name):
    try:
        return t_rh_preset(name)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"unknown t_rh preset {name!r}") from exc


class _Section:
    """Typed getters that turn parse failures into ConfigError naming the key."""

    def __init__(self, parser, name):
        self.name = name
        self.sec = parser[name] if parser.has_section(name) else {}

    def has(self, key):
        return key in self.sec

    def _get(self, key, conv, default):
        if key not in self.sec:
            return default
        raw = self.sec[key].strip()
        try:
            return conv(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r}: {exc}") from None

    def int(self, key, default=None):
        return self._get(key, int, default)

    def float(self, key, default=None):
        return self._get(key, float, default)

    def str(self, key, default=None):
        return self._get(key, str, default)

    def bool(self, key, default=None):
        table = {"1": True, "true": True, "yes": True, "on": True,
                 "0": False, "false": False, "no": False, "off": False}
        return self._get(key, lambda s: table[s.lower()], default)

    def list(self, key, conv, default=None):
        return self._get(key, lambda s: tuple(conv(x) for x in s.replace(",", " ").split()), default)

    def choice(self, key, options, default):
        val = self.str(key, default)
        if val not in options:
            raise ConfigError(f"[{self.name}] {key} = {val!r}: expected one of {', '.join(options)}")
        return val


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in parser.sections():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        allowed = SCHEMA[name]
        if allowed is None:
            continue
        for key in parser[name]:
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
    base = Path(base_dir) if base_dir is not None else Path(".")

    def path(sec, key):
        raw = sec.str(key)
        if raw is None:
            return None
        p = Path(raw)
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise ConfigError(f"[{sec.name}] {key}: file not found: {p}")
        return p

    d = _Section(parser, "dram")
    preset = d.choice("preset", ("desk", "default"), "desk")
    dram = DramConfig.desk() if preset == "desk" else DramConfig()
    t0 = dram.timing
    try:
        timing = Timing(d.int("t_act_pre", t0.t_act_pre), d.int("t_rd", t0.t_rd),
                        d.int("t_wr", t0.t_wr), d.int("t_rowclone", t0.t_rowclone))
        t_rh = d.int("t_rh", dram.t_rh)
        if d.has("t_rh_preset"):
            if d.has("t_rh"):
                raise ConfigError("[dram] give t_rh or t_rh_preset, not both")
            t_rh = _preset(d.str("t_rh_preset"))
        err = d.float("copy_error_rate", dram.copy_error_rate)
        if d.has("copy_error_preset"):
            if d.has("copy_error_rate"):
                raise ConfigError("[dram] give copy_error_rate or copy_error_preset, not both")
            name = d.str("copy_error_preset")
            if name not in COPY_ERROR_PRESETS:
                raise ConfigError(f"[dram] unknown copy_error_preset {name!r}")
            err = COPY_ERROR_PRESETS[name]
        t_ref_ms = d.float("t_ref_ms", dram.t_ref / NS_PER_MS)
        dram = dram.replace(
            banks=d.int("banks", dram.banks),
            subarrays_per_bank=d.int("subarrays_per_bank", dram.subarrays_per_bank),
            rows_per_subarray=d.int("rows_per_subarray", dram.rows_per_subarray),
            row_size=d.int("row_size", dram.row_size), t_rh=t_rh,
            t_ref=int(round(t_ref_ms * NS_PER_MS)), timing=timing, copy_error_rate=err,
            flip_once_per_window=d.bool("flip_once_per_window", dram.flip_once_per_window))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[dram] {exc}") from None

    masks = {}
    if parser.has_section("flip_mask"):
        for key, raw in parser["flip_mask"].items():
            try:
                addr = dram.check(RowAddress.parse(key))
                bits = tuple(int(b) for b in raw.replace(",", " ").split())
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"[flip_mask] {key} = {raw!r}: {exc}") from None
            if any(not 0 <= b < dram.row_bits for b in bits):
                raise ConfigError(f"[flip_mask] {key}: bit outside {dram.row_bits}-bit row")
            masks[addr] = bits

    p = _Section(parser, "policy")
    try:
        policy = DefensePolicy(
            kind=p.choice("kind", ("none", "locktable", "blindswap"), "locktable"),
            blind_swap_period=p.int("blind_swap_period"), lookup_ns=p.int("lookup_ns", 1),
            relock_window=p.int("relock_window", 1000),
            relock_counting=p.choice("relock_counting", ("global", "per_row"), "global"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[policy] {exc}") from None

    v = _Section(parser, "victim")
    victim = VictimSpec(path(v, "model"), path(v, "dataset"), path(v, "attack_dataset"),
                        v.choice("placement", ("scatter", "sequential"), "scatter"),
                        v.int("placement_seed", 0), v.int("attack_batch", 128))

    a = _Section(parser, "attack")
    attack = AttackSpec(a.choice("kind", ("bfa", "random", "pta", "trace"), "bfa"),
                        a.int("budget", 100), a.bool("double_sided", True),
                        a.bool("stop_at_chance", False), a.int("traces", 10),
                        a.int("campaigns", 2), a.int("pta_vpn", 3), a.int("pta_bit", 0))
    if attack.budget < 0 or attack.traces < 0 or attack.campaigns < 1:
        raise ConfigError("[attack] budget and traces must be >= 0, campaigns >= 1")

    u = _Section(parser, "duration")
    duration = DurationSpec(u.choice("model", ("M1", "M2"), "M1"),
                            u.list("t_rh", int, (1000,)), u.list("per_copy_error", float, (0.1,)),
                            u.float("t_ref_ms", 64.0), u.float("unlock_rate", 1000.0),
                            u.int("relock_window", 1000),
                            u.choice("error_unit", ("copy", "swap"), "copy"),
                            u.choice("method", ("analytic", "montecarlo"), "analytic"))

    r = _Section(parser, "run")
    seeds = r.list("seeds", int, (0,))
    if not seeds:
        raise ConfigError("[run] seeds must be non-empty")
    out = r.str("out")
    return ExperimentConfig(
        dram=dram, flip_masks=masks, policy=policy, n_free=p.int("n_free", 2),
        lock_budget_bytes=p.int("lock_budget_bytes", DEFAULT_BUDGET),
        entry_bytes=p.int("entry_bytes", DEFAULT_ENTRY_BYTES), victim=victim, attack=attack,
        duration=duration, seeds=seeds, out=(base / out) if out else None,
        format=r.choice("format", ("csv", "jsonl"), "csv"),
        source_hash=hashlib.sha256(text.encode()).hexdigest())


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config(text, path.parent)
