import itertools
import math

import numpy as np
import pytest
import torch

from mdra.baselines import (
    WmmseConfig,
    brute_force_joint,
    greedy_association,
    greedy_positioning,
    random_positioning,
    supports_to_bits,
    wmmse_beamform,
    wmmse_cf,
    wmmse_ma,
    zf_beamform,
)
from mdra.numerics import CDTYPE, NumericsError
from mdra.problem import BudgetExceededError, DeadEndError, SupportSet
from mdra.scenarios.cf import CfConfig, CfInstance, cf_constraint_oracle, cf_sum_rate, sample_cf_instance
from mdra.scenarios.ma import (
    MaConfig,
    MaInstance,
    ma_constraint_oracle,
    ma_sum_rate,
    sample_ma_instance,
    selected_channel,
)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def cf_inst(gains, M=1):
    """Instance whose pair (k, l) has channel norm ``gains[k][l]``."""
    g = np.asarray(gains, dtype=float)
    K, L = g.shape
    h = np.zeros((1, K, L, M), complex)
    h[0, :, :, 0] = g
    return CfInstance(h, np.zeros((1, L, 2)), np.zeros((1, K, 2)))


def test_greedy_association_no_contention():
    cfg = CfConfig(L=3, K=2, M=1, k_max=2, l_max=2)
    s = greedy_association(cf_inst([[1, 3, 2], [5, 4, 1]]), cfg)[0]
    assert s.chosen == [1, 2, 3, 4]


def test_greedy_association_lower_index_first():
    cfg = CfConfig(L=2, K=2, M=1, k_max=1, l_max=1)
    s = greedy_association(cf_inst([[2, 1], [3, 0.5]]), cfg)[0]
    assert s.chosen == [0, 3]    # UE 0 takes AP 0; UE 1 falls back to AP 1


def test_greedy_association_feasible(rng):
    cfg = CfConfig(L=4, K=7, M=2, k_max=2, l_max=2)
    oracle = cf_constraint_oracle(cfg)
    inst = sample_cf_instance(cfg, rng, 50)
    for i, s in enumerate(greedy_association(inst, cfg)):
        assert oracle.is_feasible(s.bits(), inst[i], complete=True)


def ma_inst(positions, h):
    return MaInstance(np.asarray(h, complex)[None], np.asarray(positions, float)[None])


def test_greedy_positioning_examples(rng):
    cfg = MaConfig(side=2, M=2, K=1, d_min=0.01)
    s = greedy_positioning(ma_inst(cfg.grid(), [[1, 3, 2, 0.5]]), cfg)[0]
    assert s.chosen == [1, 2]
    tight = MaConfig(side=2, M=2, K=1, d_min=0.5)
    with pytest.raises(DeadEndError):
        greedy_positioning(ma_inst(tight.grid(), [[1, 3, 2, 0.5]]), tight)
    cfg = MaConfig(side=4, M=3, K=2, d_min=0.05)
    oracle = ma_constraint_oracle(cfg)
    inst = sample_ma_instance(cfg, rng, 30)
    for i, s in enumerate(greedy_positioning(inst, cfg)):
        assert len(s) == 3 and oracle.is_feasible(s.bits(), inst[i], complete=True)


def test_random_positioning(rng):
    cfg = MaConfig(side=2, M=2, K=1, d_min=0.01)
    inst = sample_ma_instance(cfg, rng, 1)
    seen = {tuple(random_positioning(inst, cfg, rng)[0].sorted()) for _ in range(300)}
    assert seen == set(itertools.combinations(range(4), 2))
    cfg = MaConfig(side=4, M=3, K=1, d_min=0.05)
    inst = sample_ma_instance(cfg, rng, 1)
    oracle = ma_constraint_oracle(cfg)
    r = np.random.default_rng(9)
    big = MaInstance(np.repeat(inst.h, 10**4, 0), np.repeat(inst.positions, 10**4, 0))
    bits = supports_to_bits(random_positioning(big, cfg, r)).numpy()
    for row in np.unique(bits, axis=0):
        assert oracle.is_feasible(row.astype(np.int8), inst, complete=True)
    a = random_positioning(inst, cfg, np.random.default_rng(4))[0]
    b = random_positioning(inst, cfg, np.random.default_rng(4))[0]
    assert a.chosen == b.chosen
    with pytest.raises(BudgetExceededError):
        random_positioning(inst, MaConfig(side=2, M=2, K=1, d_min=0.5), rng, budget=20)


def test_wmmse_monotone_and_power(rng):
    cfg = MaConfig(side=3, M=4, K=4, d_min=0.01)
    h = torch.as_tensor(crandn(rng, 20, 4, 4) * 1e-5, dtype=CDTYPE)
    res = wmmse_ma(h, cfg, WmmseConfig(max_iter=50, tol=0.0))
    assert res.rate_history.shape[0] == 51
    assert float(res.rate_history.diff(dim=0).min()) >= -1e-8
    assert bool(((res.w.abs() ** 2).sum((1, 2, 3)) <= cfg.p_max * (1 + 1e-12)).all())
    assert torch.allclose(res.rate, ma_sum_rate(h, res.w[:, :, 0], cfg.noise), atol=1e-9)


def test_wmmse_single_user_capacity(rng):
    cfg = MaConfig(side=3, M=3, K=1, d_min=0.01)
    h = torch.as_tensor(crandn(rng, 5, 1, 3) * 1e-5, dtype=CDTYPE)
    res = wmmse_ma(h, cfg)
    cap = torch.log2(1 + cfg.p_max * (h.abs() ** 2).sum((1, 2)) / cfg.noise)
    assert torch.allclose(res.rate, cap, atol=1e-6)


def test_wmmse_per_ap_budgets(rng):
    cfg = CfConfig(L=3, K=4, M=2, k_max=2, l_max=2)
    inst = sample_cf_instance(cfg, rng, 10)
    bits = supports_to_bits(greedy_association(inst, cfg))
    res = wmmse_cf(inst, bits, cfg)
    power = (res.w.abs() ** 2).sum((1, 3))
    assert bool((power <= cfg.p_max * (1 + 1e-12)).all())
    assert float(res.rate_history.diff(dim=0).min()) >= -1e-8
    assert torch.equal(res.w[~bits.view(-1, 4, 3)], torch.zeros_like(res.w[~bits.view(-1, 4, 3)]))
    got = cf_sum_rate(inst.channels(), bits.view(-1, 4, 3), res.w, cfg.noise)
    assert torch.allclose(got, res.rate, atol=1e-9)


def test_wmmse_zero_channel():
    res = wmmse_beamform(torch.zeros(2, 3, 1, 4, dtype=CDTYPE), 1.0, 1.0)
    assert bool(torch.isfinite(res.w.real).all()) and float(res.rate.abs().max()) == 0.0


def test_zero_forcing(rng):
    q, _ = np.linalg.qr(crandn(rng, 3, 3))
    h = torch.as_tensor(q.T[None, :2], dtype=CDTYPE)      # orthonormal rows
    w = zf_beamform(h, 2.0)
    for k in range(2):
        assert torch.allclose(w[0, k], h[0, k], atol=1e-12)
    h = torch.as_tensor(crandn(rng, 50, 3, 5), dtype=CDTYPE)
    w = zf_beamform(h, 2.0)
    cross = torch.einsum("bjm,bkm->bjk", h.conj(), w).abs()
    cross = cross * (1 - torch.eye(3, dtype=torch.float64))
    assert float(cross.max()) < 1e-9
    assert torch.allclose((w.abs() ** 2).sum((1, 2)), torch.full((50,), 2.0, dtype=torch.float64), atol=1e-10)
    with pytest.raises(NumericsError):
        zf_beamform(torch.ones(1, 3, 2, dtype=CDTYPE), 1.0)
    with pytest.raises(NumericsError):
        zf_beamform(torch.ones(1, 2, 3, dtype=CDTYPE), 1.0)


def ma_solver(cfg):
    def solve(batch, bits):
        h_sel = selected_channel(batch.channels(), bits)
        return wmmse_ma(h_sel, cfg).rate
    return solve


def test_brute_force_dominates(rng):
    cfg = MaConfig(side=3, M=2, K=2, d_min=0.01)
    oracle = ma_constraint_oracle(cfg)
    inst = sample_ma_instance(cfg, rng, 1)
    res = brute_force_joint(inst, oracle, ma_solver(cfg), (2,))
    assert len(res.supports) == math.comb(9, 2)
    assert res.rate == float(res.rates.max())
    for other in (greedy_positioning(inst, cfg)[0], random_positioning(inst, cfg, rng)[0]):
        h_sel = selected_channel(inst.channels(), supports_to_bits([other]))
        assert res.rate >= float(wmmse_ma(h_sel, cfg).rate[0]) - 1e-12


def test_brute_force_single_support_and_filtering(rng):
    cfg = MaConfig(side=2, M=2, K=1, d_min=0.13)
    oracle = ma_constraint_oracle(cfg)
    inst = sample_ma_instance(cfg, rng, 1)
    only = [SupportSet(4, [0, 3])]
    assert brute_force_joint(inst, oracle, ma_solver(cfg), (), supports=only).support.sorted() == [0, 3]
    bad = [SupportSet(4, [0, 1]), SupportSet(4, [1, 2])]
    res = brute_force_joint(inst, oracle, ma_solver(cfg), (), supports=bad)
    assert [s.sorted() for s in res.supports] == [[1, 2]]
    with pytest.raises(BudgetExceededError):
        brute_force_joint(inst, oracle, ma_solver(cfg), (2,), budget=1)


def test_brute_force_ties_pick_first():
    cfg = MaConfig(side=2, M=2, K=1, d_min=0.01)
    oracle = ma_constraint_oracle(cfg)
    inst = ma_inst(cfg.grid(), [[1, 1, 1, 1]])
    res = brute_force_joint(inst, oracle, lambda b, bits: torch.zeros(bits.shape[0], dtype=torch.float64), (2,))
    assert res.support.sorted() == [0, 1]
