import numpy as np
import pytest
from hypothesis import given, strategies as st

from dramlocker.attacks import (TargetBit, _loss, bfa_progressive, default_candidates, flip_int8,
                                hammer, loss_deltas, pta_attack, random_attack,
                                random_hammer_trace, rank_bits_bruteforce)
from dramlocker.dram import DramConfig, DramState, RowAddress as R
from dramlocker.errors import EmptyCandidateSet, EncodingError
from dramlocker.experiment import build_pta, build_trial
from dramlocker.config import ExperimentConfig
from dramlocker.locker import DefensePolicy, LockController, Reservation, build_lock_table
from dramlocker.victim import Layer, QuantizedModel

# Pinned from the naive oracle on the bundled fixture (attack batch: 128 train samples, seed 0).
PINNED_TOP_BIT = TargetBit(2, 30, 7)
PINNED_BFA_FLIPS_TO_CHANCE = 3


def naive_deltas(model, batch, cands):
    """Oracle: flip one bit in a copied model, full forward pass, cross-entropy."""
    y = batch.labels.astype(np.int64)
    base = _loss(model.forward(batch.features), y)
    out = []
    for c in cands:
        m = model.copy()
        w = m.layers[c.layer].weights.reshape(-1)
        w[c.index] = flip_int8(w[c.index], c.bit)
        out.append(float(_loss(m.forward(batch.features), y) - base))
    return np.array(out)


def _ctl(kind, t_rh=50, err=0.0, rows=(R(0, 1, 10),)):
    cfg = DramConfig.desk(t_rh=t_rh, copy_error_rate=err)
    dram = DramState(cfg, flip_masks={r: (3,) for r in rows})
    return LockController(dram, build_lock_table(rows, cfg), DefensePolicy(kind), Reservation(cfg))


def test_hammer_undefended_flips_at_threshold():
    ctl = _ctl("none")
    res = hammer(ctl, R(0, 1, 10))
    assert res.flip_occurred
    assert max(res.per_aggressor.values()) == 50  # exactly t_rh allowed on the flipping aggressor
    assert res.activations_allowed == res.activations_issued == 99


def test_hammer_defended_never_flips():
    ctl = _ctl("locktable")
    res = hammer(ctl, R(0, 1, 10))
    assert not res.flip_occurred and res.activations_allowed == 0
    assert res.activations_issued == 200 and res.budget_exhausted


def test_hammer_time_budget():
    ctl = _ctl("none")
    res = hammer(ctl, R(0, 1, 10), time_budget=50 * 45 - 1, double_sided=False)
    assert not res.flip_occurred and res.budget_exhausted and res.activations_issued == 49


def test_hammer_boundary_is_single_sided():
    ctl = _ctl("none", rows=(R(0, 1, 0),))
    res = hammer(ctl, R(0, 1, 0))
    assert list(res.per_aggressor) == [R(0, 1, 1)] and res.flip_occurred


def test_vectorised_ranking_matches_oracle(fixture_model, attack_batch):
    cands = default_candidates(fixture_model)
    assert len(cands) == 160 * 8 + 2048 + 512
    fast = loss_deltas(fixture_model, attack_batch, cands)
    slow = naive_deltas(fixture_model, attack_batch, cands)
    np.testing.assert_allclose(fast, slow, rtol=1e-9, atol=1e-9)


def test_pinned_top_bit(fixture_model, attack_batch):
    ranked = rank_bits_bruteforce(fixture_model, attack_batch)
    top = ranked[0]
    assert top == PINNED_TOP_BIT
    assert top.bit == 7 and fixture_model.layers[top.layer].weights.reshape(-1)[top.index] != 0


def test_ranking_leaves_model_untouched(fixture_model, attack_batch):
    before = fixture_model.digest()
    rank_bits_bruteforce(fixture_model, attack_batch)
    assert fixture_model.digest() == before


@given(st.integers(-128, 127), st.integers(0, 7))
def test_flip_is_involution(v, b):
    assert flip_int8(flip_int8(v, b), b) == v
    assert -128 <= flip_int8(v, b) <= 127


def test_all_zero_model_ties(attack_batch):
    m = QuantizedModel([Layer(np.zeros((64, 4), np.int8), 0.1), Layer(np.zeros((4, 10), np.int8), 0.1, "identity")])
    cands = [TargetBit(l, i, 7) for l in (0, 1) for i in range(m.layer_sizes[l])]
    ranked = rank_bits_bruteforce(m, attack_batch, reversed(cands))
    # no single flip changes the logits (every path crosses a zero layer): pure tie-break order
    assert ranked == sorted(cands)
    with pytest.raises(EmptyCandidateSet):
        rank_bits_bruteforce(m, attack_batch, [])


def _trial(policy, err=0.0):
    cfg = ExperimentConfig(dram=DramConfig.desk(copy_error_rate=err), policy=DefensePolicy(policy))
    return build_trial(cfg, 0)


def test_bfa_undefended_reaches_chance(test_set, attack_batch):
    t = _trial("none")
    rep = bfa_progressive(t.model, t.wmap, t.controller, 50, test_set, attack_batch)
    assert rep.final_accuracy <= 0.2
    assert rep.flips_to(0.2) == PINNED_BFA_FLIPS_TO_CHANCE <= 50
    assert rep.flips_landed <= rep.flips_attempted


def test_bfa_defended_flat(test_set, attack_batch):
    t = _trial("locktable")
    rep = bfa_progressive(t.model, t.wmap, t.controller, 20, test_set, attack_batch,
                          stop_at_chance=False)
    assert rep.flips_landed == 0 and rep.flips_attempted == 20
    assert all(acc == rep.clean_accuracy for _, acc in rep.accuracy_curve)
    assert rep.denied_activations == 20 * 4 * 1000


def test_budget_zero(test_set, attack_batch):
    t = _trial("none")
    rep = bfa_progressive(t.model, t.wmap, t.controller, 0, test_set, attack_batch)
    assert rep.accuracy_curve == [(0, rep.clean_accuracy)]
    rep = random_attack(t.model, t.wmap, t.controller, 0, test_set, seed=1)
    assert rep.final_accuracy == rep.clean_accuracy


def test_random_attack_deterministic(test_set):
    reps = []
    for _ in range(2):
        t = _trial("none")
        reps.append(random_attack(t.model, t.wmap, t.controller, 15, test_set, seed=7))
    assert reps[0].accuracy_curve == reps[1].accuracy_curve
    assert [r.target for r in reps[0].iterations] == [r.target for r in reps[1].iterations]
    assert reps[0].flips_landed == 15


def test_pta_undefended_redirects():
    cfg = ExperimentConfig(policy=DefensePolicy("none"))
    s = build_pta(cfg, 0)
    rep = pta_attack(s.page_table, s.controller, 3, 0)
    x = rep.extra
    assert x["redirected"] and x["final"] != x["original"] == s.frames[3]
    assert cfg.dram.flat(x["final"]) == cfg.dram.flat(x["original"]) ^ 1


def test_pta_defended_unchanged():
    s = build_pta(ExperimentConfig(), 0)
    before = s.page_table.raw_bytes()
    rep = pta_attack(s.page_table, s.controller, 3, 4)
    assert not rep.extra["redirected"] and s.page_table.raw_bytes() == before


def test_pta_valid_bit_faults():
    s = build_pta(ExperimentConfig(policy=DefensePolicy("none")), 0)
    rep = pta_attack(s.page_table, s.controller, 5, 31)
    assert rep.extra["faulted"] and rep.extra["final"] is None


def test_pta_encoding_error():
    s = build_pta(ExperimentConfig(), 0)
    with pytest.raises(EncodingError):
        pta_attack(s.page_table, s.controller, 3, 32)


def test_random_trace_shape():
    cfg = DramConfig.desk()
    prot = [R(0, 2, 5), R(0, 4, 9)]
    tr = random_hammer_trace(cfg, prot, np.random.default_rng(3), n_campaigns=3)
    assert len(tr.campaigns) == 3 and set(tr.flip_masks) == set(prot)
    for c in tr.campaigns:
        assert c.victim in prot and all(cfg.t_rh // 2 <= n <= 3 * cfg.t_rh // 2 for n in c.counts)
