"""Trial assembly and scenario runners shared by the CLI, scripts and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import analysis
from .attacks import (AttackReport, bfa_progressive, chance_band, pta_attack, random_attack,
                      random_hammer_trace, run_trace)
from .config import ExperimentConfig
from .dram import DramState, RowAddress
from .locker import LockController, Reservation, build_lock_table
from .victim import (Dataset, PageTable, QuantizedModel, WeightMap, evaluate, load_dataset,
                     load_model, map_weights_to_rows, sync_model_from_dram, write_model_to_dram)

@dataclass
class Trial:
    config: ExperimentConfig
    seed: int
    model: QuantizedModel
    wmap: WeightMap
    controller: LockController
    test_set: Dataset
    attack_batch: Dataset

    @property
    def dram(self) -> DramState:
        return self.controller.dram

    def accuracy(self) -> float:
        return evaluate(sync_model_from_dram(self.model, self.wmap, self.dram), self.test_set,
                        sample_size=None)


_CACHE: dict = {}
_PLACEMENTS: dict = {}


def _victim(cfg: ExperimentConfig):
    key = (cfg.victim.model, cfg.victim.dataset, cfg.victim.attack_dataset, cfg.victim.attack_batch)
    if key not in _CACHE:
        model = load_model(cfg.victim.model)
        test = load_dataset(cfg.victim.dataset, split="test")
        train = load_dataset(cfg.victim.attack_dataset, split="train")
        batch = train.sample(min(cfg.victim.attack_batch, len(train)), seed=0)
        _CACHE[key] = (model, test, batch)
    return _CACHE[key]


def build_trial(cfg: ExperimentConfig, seed: int) -> Trial:
    """Place the victim in DRAM, lock the neighbours of its rows, wire the controller."""
    model, test, batch = _victim(cfg)
    dram_cfg = cfg.dram
    reservation = Reservation(dram_cfg, cfg.n_free)
    dram = DramState(dram_cfg, flip_masks=cfg.flip_masks)
    key = (model.digest(), dram_cfg, cfg.victim.placement, cfg.victim.placement_seed, cfg.n_free)
    if key not in _PLACEMENTS:
        _PLACEMENTS[key] = map_weights_to_rows(model, dram_cfg, cfg.victim.placement,
                                               cfg.victim.placement_seed, reservation)
    wmap = _PLACEMENTS[key]
    write_model_to_dram(model, wmap, dram)
    table = build_lock_table(wmap.rows, dram_cfg, cfg.lock_budget_bytes, cfg.entry_bytes)
    controller = LockController(dram, table, cfg.policy, reservation, seed=seed)
    return Trial(cfg, seed, model, wmap, controller, test, batch)


def run_attack(trial: Trial) -> AttackReport:
    spec = trial.config.attack
    if spec.kind == "bfa":
        return bfa_progressive(trial.model, trial.wmap, trial.controller, spec.budget,
                               trial.test_set, trial.attack_batch, double_sided=spec.double_sided,
                               stop_at_chance=spec.stop_at_chance)
    if spec.kind == "random":
        return random_attack(trial.model, trial.wmap, trial.controller, spec.budget,
                             trial.test_set, seed=trial.seed, double_sided=spec.double_sided,
                             stop_at_chance=spec.stop_at_chance)
    raise ValueError(f"run_attack does not handle kind {spec.kind!r}")


# -- page-table scenario -----------------------------------------------------------------

@dataclass
class PtaSetup:
    page_table: PageTable
    controller: LockController
    frames: dict  # vpn -> mapped frame


def build_pta(cfg: ExperimentConfig, seed: int, n_entries: int = 16) -> PtaSetup:
    """One page-table row in subarray 0 with ``n_entries`` mapped pages; under the
    lock-table policy the PTE row's neighbours are locked."""
    dram_cfg = cfg.dram
    reservation = Reservation(dram_cfg, cfg.n_free)
    dram = DramState(dram_cfg)
    pte_row = RowAddress(0, 0, 8)
    pt = PageTable(dram, [pte_row], n_entries)
    rng = np.random.default_rng(seed)
    frames = {}
    usable = reservation.first_reserved
    for vpn in range(n_entries):
        sub = int(rng.integers(1, dram_cfg.subarrays_per_bank))
        frame = RowAddress(0, sub, int(rng.integers(usable)))
        pt.map(vpn, frame)
        frames[vpn] = frame
    table = build_lock_table([pte_row], dram_cfg, cfg.lock_budget_bytes, cfg.entry_bytes)
    controller = LockController(dram, table, cfg.policy, reservation, seed=seed)
    return PtaSetup(pt, controller, frames)


def run_pta(cfg: ExperimentConfig, seed: int) -> AttackReport:
    setup = build_pta(cfg, seed)
    return pta_attack(setup.page_table, setup.controller, cfg.attack.pta_vpn, cfg.attack.pta_bit)


# -- random-trace scenario ------------------------------------------------------------------

@dataclass
class TraceOutcome:
    index: int
    campaigns: int
    completing: int
    flipped_campaigns: int  # completing campaigns whose victim flipped in that window
    flips_protected: int
    denied: int
    accuracy: float


def run_traces(cfg: ExperimentConfig, seed: int, n_traces: int | None = None) -> list[TraceOutcome]:
    """One fresh trial per trace. Trace i is generated from rng([seed, i]); its
    controller (RowClone draws, free-row picks) is seeded with seed * 100003 + i."""
    n = cfg.attack.traces if n_traces is None else n_traces
    out = []
    for i in range(n):
        trial = build_trial(cfg, seed * 100_003 + i)
        ctl = trial.controller
        trace = random_hammer_trace(cfg.dram, ctl.table.protected,
                                    np.random.default_rng([seed, i]), cfg.attack.campaigns,
                                    reservation=ctl.reservation)
        start_window = -(-ctl.now // cfg.dram.t_ref)
        stats = run_trace(trace, ctl)
        flipped = {(v, t // cfg.dram.t_ref) for v, _, t in stats.flip_events}
        completing = [c for c in trace.campaigns if c.completes]
        hit = sum((c.victim, start_window + c.window) in flipped for c in completing)
        out.append(TraceOutcome(i, len(trace.campaigns), len(completing), hit,
                                stats.flips_protected, stats.denied_activations, trial.accuracy()))
    return out


TRACE_COLUMNS = ("trace", "campaigns", "completing", "flipped_campaigns", "flips_protected",
                 "denied", "accuracy")
PTA_COLUMNS = ("vpn", "bit", "original", "final", "redirected", "faulted", "denied")
LATENCY_COLUMNS = ("component", "ns")


def trace_rows(outcomes) -> list[dict]:
    return [{"trace": o.index, "campaigns": o.campaigns, "completing": o.completing,
             "flipped_campaigns": o.flipped_campaigns, "flips_protected": o.flips_protected,
             "denied": o.denied, "accuracy": o.accuracy} for o in outcomes]


def pta_rows(report: AttackReport) -> list[dict]:
    x = report.extra
    return [{"vpn": x["vpn"], "bit": x["bit"], "original": x["original"], "final": x["final"],
             "redirected": x["redirected"], "faulted": x["faulted"],
             "denied": report.denied_activations}]


def latency_rows(rep: analysis.LatencyReport) -> list[dict]:
    rows = [{"component": k, "ns": v} for k, v in rep.breakdown.items()]
    rows.append({"component": "total", "ns": rep.total_ns})
    rows.append({"component": "swaps", "ns": rep.swaps})
    return rows


def duration_params(cfg: ExperimentConfig):
    d = cfg.duration
    base = analysis.DurationModelParams(d.model, d.per_copy_error[0], d.t_rh[0],
                                        int(round(d.t_ref_ms * 1_000_000)), d.unlock_rate,
                                        d.relock_window, d.error_unit, cfg.dram.timing)
    return base, d.t_rh, d.per_copy_error


def in_chance_band(acc: float, classes: int) -> bool:
    lo, hi = chance_band(classes)
    return lo <= acc <= hi
