"""Adversaries: the hammer driver, targeted BFA, random flips and the page-table attack.

Every flip is realised physically: the attacker sets the victim row's
``flip_mask`` to the bits it wants (it knows the vulnerable cells and the
weight-to-row mapping) and hammers the row's neighbours through the
controller as an untrusted process. Whether the flip lands is decided by
the DRAM model and the active defence, never by the attack code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dram import RowAddress
from .errors import EmptyCandidateSet, EncodingError, PageFault
from .locker import Idle, LockController, MemOp
from .victim import (PTE_BYTES, Dataset, PageTable, QuantizedModel, WeightMap,
                     evaluate, sync_model_from_dram, translate)


@dataclass(frozen=True, order=True)
class TargetBit:
    layer: int
    index: int
    bit: int


@dataclass
class HammerResult:
    activations_issued: int
    activations_allowed: int
    flip_occurred: bool
    per_aggressor: dict = field(default_factory=dict)  # aggressor -> allowed count
    budget_exhausted: bool = False


@dataclass
class IterationRecord:
    iteration: int
    flips_landed: int
    accuracy: float
    denied: int
    time_ns: int
    target: object = None
    landed: bool = False


@dataclass
class AttackReport:
    kind: str
    policy: str
    clean_accuracy: float
    flips_attempted: int = 0
    flips_landed: int = 0
    denied_activations: int = 0
    wall_model_time: int = 0
    iterations: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def accuracy_curve(self) -> list[tuple[int, float]]:
        """(cumulative landed flips, accuracy); the last point per flip count wins."""
        curve = {0: self.clean_accuracy}
        for rec in self.iterations:
            curve[rec.flips_landed] = rec.accuracy
        return sorted(curve.items())

    @property
    def final_accuracy(self) -> float:
        return self.iterations[-1].accuracy if self.iterations else self.clean_accuracy

    def flips_to(self, threshold: float) -> Optional[int]:
        """Landed flips at the first point with accuracy <= threshold (None if never)."""
        for flips, acc in self.accuracy_curve:
            if acc <= threshold:
                return flips
        return None


def chance_band(classes: int) -> tuple[float, float]:
    return 0.0, 2.0 / classes


# -- hammer -----------------------------------------------------------------------------

def hammer(controller: LockController, victim_row: RowAddress, double_sided: bool = True,
           max_attempts: int | None = None, time_budget: int | None = None) -> HammerResult:
    """Hammer the victim's neighbours round-robin with untrusted activations.

    Stops when the victim flips, when every aggressor has t_rh executed
    activations, when ``max_attempts`` (default 2 x t_rh per aggressor) is spent,
    or when ``time_budget`` ns (default: the rest of the refresh window) elapse.
    """
    cfg = controller.config
    t_rh = cfg.t_rh
    aggressors = cfg.neighbors(victim_row)
    if not double_sided:
        aggressors = aggressors[:1]
    if max_attempts is None:
        max_attempts = 2 * t_rh * len(aggressors)
    start = controller.now
    deadline = start + time_budget if time_budget is not None else (start // cfg.t_ref + 1) * cfg.t_ref
    allowed = {a: 0 for a in aggressors}
    ops = [MemOp("act", a) for a in aggressors]
    issued = 0
    flipped = False
    exhausted = False
    t_act = cfg.timing.t_act_pre
    process = controller.process
    while True:
        if all(c >= t_rh for c in allowed.values()):
            break
        if issued >= max_attempts:
            exhausted = True
            break
        op = ops[issued % len(ops)]
        # an activation that cannot complete inside the budget is not issued
        if controller.now + t_act > deadline:
            exhausted = True
            break
        step = process(op)
        issued += 1
        if step.action != "skipped":
            allowed[op.row] += 1
        if any(v == victim_row for v, _ in step.flips):
            flipped = True
            break
    return HammerResult(issued, sum(allowed.values()), flipped, allowed, exhausted)


# -- bit sensitivity ----------------------------------------------------------------------

def flip_int8(value: int, bit: int) -> int:
    u = (int(value) & 0xFF) ^ (1 << bit)
    return u - 256 if u >= 128 else u


def default_candidates(model: QuantizedModel) -> list[TargetBit]:
    """All bits of the output layer plus the sign/MSB bit of every weight."""
    out = set()
    last = len(model.layers) - 1
    for li, layer in enumerate(model.layers):
        for idx in range(layer.weights.size):
            out.add(TargetBit(li, idx, 7))
            if li == last:
                out.update(TargetBit(li, idx, b) for b in range(7))
    return sorted(out)


def _loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean cross-entropy over the last-but-one axis; works on (..., B, K)."""
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
    picked = logits[..., np.arange(len(labels)), labels]
    return (lse - picked).mean(axis=-1)


def model_loss(model: QuantizedModel, batch: Dataset) -> float:
    return float(_loss(model.forward(batch.features), batch.labels.astype(np.int64)))


def loss_deltas(model: QuantizedModel, batch: Dataset, candidates) -> np.ndarray:
    """Loss increase for flipping each candidate bit alone (vectorised).

    Flipping weight (i, j) of layer L only changes column j of that layer's
    pre-activation; the rest of the network is re-run for all candidates at once.
    """
    x = batch.features
    y = batch.labels.astype(np.int64)
    reals = [l.real for l in model.layers]
    acts, pres = [x], []
    for l, w in zip(model.layers, reals):
        z = acts[-1] @ w
        pres.append(z)
        acts.append(np.maximum(z, 0) if l.activation == "relu" else z)
    base = float(_loss(acts[-1], y))
    cands = list(candidates)
    out = np.empty(len(cands))
    by_layer: dict = {}
    for k, c in enumerate(cands):
        by_layer.setdefault(c.layer, []).append(k)
    n_layers = len(model.layers)
    chunk = 512
    for li, ks in by_layer.items():
        layer = model.layers[li]
        n_out = layer.weights.shape[1]
        flat = layer.weights.reshape(-1)
        for s in range(0, len(ks), chunk):
            part = ks[s:s + chunk]
            idx = np.array([cands[k].index for k in part])
            bits = np.array([cands[k].bit for k in part])
            old = flat[idx].astype(np.int64)
            new = ((old & 0xFF) ^ (1 << bits))
            new = np.where(new >= 128, new - 256, new)
            d = (new - old) * layer.scale
            ii, jj = np.divmod(idx, n_out)
            col = pres[li][:, jj].T + acts[li][:, ii].T * d[:, None]  # (C, B)
            if layer.activation == "relu":
                col = np.maximum(col, 0)
            if li == n_layers - 1:
                logits = np.broadcast_to(acts[-1], (len(part),) + acts[-1].shape).copy()
                logits[np.arange(len(part)), :, jj] = col
            else:
                delta = col - acts[li + 1][:, jj].T  # (C, B)
                z = pres[li + 1][None] + delta[:, :, None] * reals[li + 1][jj][:, None, :]
                for lj in range(li + 1, n_layers):
                    a = np.maximum(z, 0) if model.layers[lj].activation == "relu" else z
                    if lj == n_layers - 1:
                        logits = a
                    else:
                        z = a @ reals[lj + 1]
            out[part] = _loss(logits, y) - base
    return out


def rank_bits_bruteforce(model: QuantizedModel, batch: Dataset, candidates=None) -> list[TargetBit]:
    """Order candidate bits by loss increase, ties broken by (layer, index, bit)."""
    cands = default_candidates(model) if candidates is None else sorted(candidates)
    if not cands:
        raise EmptyCandidateSet("no candidate bits to rank")
    deltas = loss_deltas(model, batch, cands)
    order = sorted(range(len(cands)), key=lambda k: (-deltas[k], cands[k]))
    return [cands[k] for k in order]


# -- weight attacks ---------------------------------------------------------------------------

def _campaign(controller: LockController, wmap: WeightMap, target: TargetBit, double_sided: bool):
    row, bit_offset = wmap.locate(target.layer, target.index, target.bit)
    dram = controller.dram
    before = dram.peek(row)[bit_offset >> 3] >> (bit_offset & 7) & 1
    controller.advance_to_next_window()
    dram.set_flip_mask(row, (bit_offset,))
    denied0 = controller.stats.denied_activations
    hammer(controller, row, double_sided=double_sided)
    dram.clear_flip_mask(row)
    after = dram.peek(row)[bit_offset >> 3] >> (bit_offset & 7) & 1
    return before != after, controller.stats.denied_activations - denied0


def _run_campaigns(kind, targets, model, wmap, controller, eval_set, budget, stop_at,
                   double_sided, on_landed=None) -> AttackReport:
    clean = evaluate(sync_model_from_dram(model, wmap, controller.dram), eval_set, sample_size=None)
    report = AttackReport(kind, controller.policy.kind, clean)
    t0 = controller.now
    acc = clean
    landed = 0
    for it in range(1, budget + 1):
        if stop_at is not None and acc <= stop_at:
            break
        target = targets(it)
        if target is None:
            break
        ok, denied = _campaign(controller, wmap, target, double_sided)
        report.flips_attempted += 1
        report.denied_activations += denied
        if ok:
            landed += 1
            if on_landed:
                on_landed()
        current = sync_model_from_dram(model, wmap, controller.dram)
        acc = evaluate(current, eval_set, sample_size=None)
        report.iterations.append(IterationRecord(it, landed, acc, report.denied_activations,
                                                 controller.now - t0, target, ok))
    report.flips_landed = landed
    report.wall_model_time = controller.now - t0
    return report


def bfa_progressive(model: QuantizedModel, wmap: WeightMap, controller: LockController,
                    budget: int, eval_set: Dataset, attack_batch: Dataset, candidates=None,
                    double_sided: bool = True, stop_at_chance: bool = True) -> AttackReport:
    """Targeted BFA: each iteration ranks bits on the model as currently stored in
    DRAM, then hammers for the best bit not yet attempted."""
    attempted: set = set()
    cache: dict = {}

    def next_target(_it):
        current = sync_model_from_dram(model, wmap, controller.dram)
        key = current.digest()
        if key not in cache:
            cache.clear()
            cache[key] = rank_bits_bruteforce(current, attack_batch, candidates)
        for t in cache[key]:
            if t not in attempted:
                attempted.add(t)
                return t
        return None

    stop = chance_band(model.output_classes)[1] if stop_at_chance else None
    return _run_campaigns("bfa", next_target, model, wmap, controller, eval_set, budget, stop,
                          double_sided)


def random_attack(model: QuantizedModel, wmap: WeightMap, controller: LockController,
                  budget: int, eval_set: Dataset, seed: int = 0, double_sided: bool = True,
                  stop_at_chance: bool = False) -> AttackReport:
    """Flip uniformly random weight bits (without replacement) by hammering their rows."""
    rng = np.random.default_rng(seed)
    total_bits = wmap.total_bytes * 8
    picks = rng.choice(total_bits, size=min(budget, total_bits), replace=False)
    offsets = np.cumsum([0] + list(wmap.layer_sizes))

    def next_target(it):
        if it > len(picks):
            return None
        g, bit = divmod(int(picks[it - 1]), 8)
        layer = int(np.searchsorted(offsets, g, side="right") - 1)
        return TargetBit(layer, g - int(offsets[layer]), bit)

    stop = chance_band(model.output_classes)[1] if stop_at_chance else None
    rep = _run_campaigns("random", next_target, model, wmap, controller, eval_set, budget, stop,
                         double_sided)
    rep.extra["seed"] = seed
    return rep


# -- page-table attack ----------------------------------------------------------------------------

def pta_attack(pt: PageTable, controller: LockController, vpn: int, bit: int,
               frame=None, double_sided: bool = True) -> AttackReport:
    """Insert (optionally) our own PTE for ``vpn``, then hammer its row so that
    ``bit`` of the 32-bit entry flips and the page points at a different frame."""
    if not 0 <= bit < PTE_BYTES * 8:
        raise EncodingError(f"bit {bit} outside the {PTE_BYTES * 8}-bit PTE")
    if frame is not None:
        pt.map(vpn, frame)
    page = vpn * pt.page_size

    def resolve():
        try:
            return translate(pt, page)
        except PageFault:
            return None

    original = resolve()
    row, bit_offset = pt.bit_location(vpn, bit)
    before_bytes = pt.raw_bytes()
    report = AttackReport("pta", controller.policy.kind, float("nan"))
    controller.advance_to_next_window()
    t0 = controller.now
    denied0 = controller.stats.denied_activations
    controller.dram.set_flip_mask(row, (bit_offset,))
    res = hammer(controller, row, double_sided=double_sided)
    controller.dram.clear_flip_mask(row)
    final = resolve()
    report.flips_attempted = 1
    report.flips_landed = int(pt.raw_bytes() != before_bytes)
    report.denied_activations = controller.stats.denied_activations - denied0
    report.wall_model_time = controller.now - t0
    report.extra.update(
        vpn=vpn, bit=bit, pte_row=row, original=original, final=final,
        redirected=final is not None and final != original, faulted=final is None,
        hammer=res,
    )
    return report


# -- random attacker traces -----------------------------------------------------------------------------

@dataclass
class TraceCampaign:
    victim: RowAddress
    aggressors: tuple
    counts: tuple  # activations issued per aggressor
    window: int

    @property
    def completes(self) -> bool:
        """True if some aggressor is issued enough activations to reach t_rh."""
        return max(self.counts) >= self._t_rh

    _t_rh: int = 0


@dataclass
class HammerTrace:
    stream: list  # MemOp items and ("window", k) markers
    campaigns: list
    flip_masks: dict  # vulnerable cells of the protected rows


def random_hammer_trace(config, protected, rng: np.random.Generator, n_campaigns: int = 2,
                        noise: float = 0.05, reservation=None, mask_bits: int = 3) -> HammerTrace:
    """Untrusted attacker stream: one campaign per refresh window, each hammering
    the neighbours of a randomly chosen protected row a random number of times in
    ``[t_rh/2, 3*t_rh/2]``, with random ACT/RD/WR noise on unrelated rows mixed in.
    Each protected row gets 1..mask_bits random vulnerable cells.
    """
    protected = sorted(protected)
    t_rh = config.t_rh
    masks = {p: tuple(sorted(set(int(b) for b in rng.integers(0, config.row_bits,
                                                               int(rng.integers(1, mask_bits + 1))))))
             for p in protected}
    blocked = set(protected)
    for p in protected:
        blocked.update(config.neighbors(p))
    noise_rows = []
    while len(noise_rows) < 16:
        addr = RowAddress(int(rng.integers(config.banks)), int(rng.integers(config.subarrays_per_bank)),
                          int(rng.integers(config.rows_per_subarray)))
        if addr not in blocked and (reservation is None or not reservation.is_reserved(addr)):
            noise_rows.append(addr)
    stream, campaigns = [], []
    for window in range(n_campaigns):
        victim = protected[int(rng.integers(len(protected)))]
        aggs = config.neighbors(victim)
        if len(aggs) == 2 and rng.random() < 0.3:
            aggs = [aggs[int(rng.integers(2))]]
        counts = [int(rng.integers(t_rh // 2, 3 * t_rh // 2 + 1)) for _ in aggs]
        campaigns.append(TraceCampaign(victim, tuple(aggs), tuple(counts), window, t_rh))
        stream.append(("window", window))
        ops = [MemOp("act", a) for a in aggs]
        # round-robin over the aggressors until each has issued its count
        order = [i for k in range(max(counts)) for i in range(len(aggs)) if k < counts[i]]
        noisy = rng.random(len(order)) < noise
        n_noise = int(noisy.sum())
        picks = rng.integers(len(noise_rows), size=n_noise)
        kinds = rng.integers(3, size=n_noise)
        j = 0
        for i, extra in zip(order, noisy):
            stream.append(ops[i])
            if extra:
                kind = ("act", "rd", "wr")[kinds[j]]
                payload = None
                if kind == "wr":
                    payload = rng.integers(0, 256, config.row_size, dtype=np.uint8).tobytes()
                stream.append(MemOp(kind, noise_rows[picks[j]], payload=payload))
                j += 1
    return HammerTrace(stream, campaigns, masks)


def run_trace(trace: HammerTrace, controller: LockController):
    """Install the trace's flip masks and execute it; a window marker idles
    until that refresh window starts. Returns the stats for this trace."""
    t_ref = controller.config.t_ref
    for row, bits in trace.flip_masks.items():
        controller.dram.set_flip_mask(row, bits)
    base = controller.now // t_ref + (controller.now % t_ref != 0)
    before = controller.stats.copy()
    for item in trace.stream:
        if isinstance(item, tuple):
            target = (base + item[1]) * t_ref
            if controller.now > target:
                raise RuntimeError("campaign overran its refresh window")
            controller.process(Idle(target - controller.now))
            continue
        controller.process(item)
    return controller.stats.since(before)
