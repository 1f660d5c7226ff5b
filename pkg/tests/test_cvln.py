import itertools

import numpy as np
import pytest
import torch

from mdra.config import ModelConfig
from mdra.critic import CfCritic, MaCritic
from mdra.cvln import (
    CfBeamformer,
    MaBeamformer,
    optimal_structure_beamformer,
    per_ap_projection,
    random_feasible_support,
    random_support_batch,
)
from mdra.numerics import CDTYPE, finite_diff_check
from mdra.problem import BudgetExceededError, FeasibilityOracle
from mdra.scenarios.cf import CfConfig, cf_blocked, cf_sum_rate, channel_rms, sample_cf_instance
from mdra.scenarios.ma import MaConfig, conflict_matrix, ma_blocked, ma_constraint_oracle, ma_sum_rate, pair_distances, sample_ma_instance

MODEL = ModelConfig(d_h=8, beamformer_width=8, beamformer_layers=1, critic_layers=2, heads=2, batch_norm=False)


def crandn(rng, *shape):
    return torch.as_tensor(rng.standard_normal(shape) + 1j * rng.standard_normal(shape), dtype=CDTYPE)


def test_projection_examples(rng):
    w = crandn(rng, 1, 2, 2, 3)
    bits = torch.tensor([[[1, 0], [1, 1]]])
    p_max = 2.0
    power = (w.abs() ** 2 * bits[..., None]).sum((1, 3))

    half = w / torch.sqrt(power / (p_max / 2))[:, None, :, None]
    out = per_ap_projection(half, bits, p_max)
    assert torch.equal(out[0, 0, 1], torch.zeros(3, dtype=CDTYPE))
    assert torch.allclose(out[bits.bool()], half[bits.bool()], atol=1e-15)

    double = w / torch.sqrt(power / (2 * p_max))[:, None, :, None]
    out = per_ap_projection(double, bits, p_max)
    assert torch.allclose((out.abs() ** 2).sum((1, 3)), torch.full((1, 2), p_max, dtype=torch.float64), atol=1e-12)


def test_cf_beamformer_power_and_gating(rng):
    system = CfConfig(L=3, K=4, M=2, k_max=2, l_max=1)
    inst = sample_cf_instance(system, rng, 16)
    net = CfBeamformer(system, MODEL, channel_rms(inst.h))
    bits = torch.as_tensor(rng.random((16, 4, 3)) < 0.5)
    w = net(inst.channels(), bits)
    assert bool((w[~bits] == 0).all())
    assert bool(((w.abs() ** 2).sum((1, 3)) <= system.p_max + 1e-9).all())


def dense_beamformer(h, mu, p, noise):
    K, M = h.shape
    A = np.eye(M) + sum(mu[i] * np.outer(h[i], h[i].conj()) / noise for i in range(K))
    x = np.linalg.inv(A) @ h.T
    return (x / np.linalg.norm(x, axis=0) * np.sqrt(p)).T


def test_optimal_structure_single_user(rng):
    h = crandn(rng, 1, 1, 4)
    w = optimal_structure_beamformer(h, torch.tensor([[3.0]]), torch.tensor([[3.0]]), 0.5)
    want = dense_beamformer(h[0].numpy(), [3.0], [3.0], 0.5)
    assert np.allclose(w[0].numpy(), want, atol=1e-12)
    assert np.allclose(w[0, 0].numpy(), np.sqrt(3.0) * h[0, 0].numpy() / np.linalg.norm(h[0, 0].numpy()), atol=1e-12)


def test_optimal_structure_matches_dense_inverse(rng):
    h = crandn(rng, 1, 3, 4)
    mu = torch.tensor([[0.5, 1.0, 1.5]], dtype=torch.float64)
    p = torch.tensor([[1.0, 0.5, 1.5]], dtype=torch.float64)
    w = optimal_structure_beamformer(h, mu, p, 0.1)
    assert np.allclose(w[0].numpy(), dense_beamformer(h[0].numpy(), mu[0].numpy(), p[0].numpy(), 0.1), atol=1e-10)


def test_optimal_structure_orthogonal_channels():
    h = torch.zeros(1, 2, 3, dtype=CDTYPE)
    h[0, 0, 0] = 1 + 1j
    h[0, 1, 2] = 2.0
    ones = torch.ones(1, 2, dtype=torch.float64)
    w = optimal_structure_beamformer(h, ones, ones, 1.0)
    for k in range(2):
        unit = h[0, k] / torch.linalg.vector_norm(h[0, k])
        assert torch.allclose(w[0, k], unit, atol=1e-14)


def test_ma_beamformer_total_power_and_unit_directions(rng):
    system = MaConfig(side=3, M=3, K=2, d_min=0.07)
    inst = sample_ma_instance(system, rng, 8)
    h_sel = inst.channels()[:, :, :3]
    net = MaBeamformer(system, MODEL, channel_rms(inst.h))
    mu, p = net.weights(h_sel)
    assert torch.allclose(mu.sum(-1), torch.full((8,), system.p_max, dtype=torch.float64), atol=1e-9)
    w = net(h_sel)
    assert torch.allclose((w.abs() ** 2).sum((1, 2)), torch.full((8,), system.p_max, dtype=torch.float64), atol=1e-9)
    dirs = w / torch.sqrt(p)[..., None]
    assert torch.allclose(torch.linalg.vector_norm(dirs, dim=-1), torch.ones(8, 2, dtype=torch.float64), atol=1e-10)


def test_beamformer_rate_gradients_match_finite_differences(rng):
    system = MaConfig(side=3, M=2, K=2, d_min=0.07)
    inst = sample_ma_instance(system, rng, 4)
    h_sel = inst.channels()[:, :, [0, 5]]
    net = MaBeamformer(system, MODEL, channel_rms(inst.h))
    params = [net.head.weight, net.head.bias]
    fn = lambda: ma_sum_rate(h_sel, net(h_sel), system.noise).mean()  # noqa: E731
    assert finite_diff_check(fn, params, step=1e-4, stencil=4) < 1e-4

    cf = CfConfig(L=2, K=3, M=2, k_max=2, l_max=1)
    ci = sample_cf_instance(cf, rng, 4)
    cnet = CfBeamformer(cf, MODEL, channel_rms(ci.h))
    bits = torch.tensor([[1, 0], [0, 1], [1, 0]]).expand(4, 3, 2)
    fn = lambda: cf_sum_rate(ci.channels(), bits, cnet(ci.channels(), bits), cf.noise).mean()  # noqa: E731
    assert finite_diff_check(fn, [cnet.head.weight, cnet.head.bias], step=1e-4, stencil=4) < 1e-4


def test_random_feasible_support_unconstrained_pairs(rng):
    oracle = FeasibilityOracle(4, ())
    pairs = {frozenset(c) for c in itertools.combinations(range(4), 2)}
    seen = set()
    for _ in range(200):
        s = random_feasible_support(oracle, None, rng, cardinality=2)
        assert s.as_set() in pairs
        seen.add(s.as_set())
    assert seen == pairs
    a = random_feasible_support(oracle, None, np.random.default_rng(5), bound=3)
    b = random_feasible_support(oracle, None, np.random.default_rng(5), bound=3)
    assert a.chosen == b.chosen and 1 <= len(a) <= 3


def test_random_feasible_support_spacing(rng):
    system = MaConfig(side=4, M=3, K=1, d_min=0.05)
    oracle = ma_constraint_oracle(system)
    inst = sample_ma_instance(system, rng, 1)
    d = pair_distances(inst.positions[0])
    conflicts = conflict_matrix(inst.positions, system.d_min)

    def fast(bits):
        return ma_blocked(torch.as_tensor(bits, dtype=torch.bool)[None], conflicts, system.M)[0].numpy()

    draws = [random_feasible_support(oracle, inst, rng, cardinality=3) for _ in range(100)]
    draws += [random_feasible_support(oracle, inst, rng, cardinality=3, blocked=fast) for _ in range(10**4)]
    for s in draws:
        assert all(d[i, j] >= system.d_min - 1e-12 for i, j in itertools.combinations(s.sorted(), 2))


def test_random_feasible_support_budget():
    oracle = FeasibilityOracle(2, ())
    with pytest.raises(BudgetExceededError):
        random_feasible_support(oracle, None, np.random.default_rng(0), cardinality=3, max_restarts=5)


def test_random_support_batch_respects_loads():
    system = CfConfig(L=3, K=4, M=1, k_max=2, l_max=1)
    g = torch.Generator().manual_seed(0)
    counts = torch.randint(1, system.max_support + 1, (300,), generator=g)
    bits = random_support_batch(lambda c, _r: cf_blocked(c, system), counts, system.n_b, g)
    assert torch.equal(bits.sum(-1), counts)
    b = bits.view(-1, 4, 3)
    assert bool((b.sum(1) <= 2).all()) and bool((b.sum(2) <= 1).all())


def test_critic_zero_parameters_and_invariance(rng):
    cf = CfConfig(L=3, K=4, M=2, k_max=2, l_max=1)
    inst = sample_cf_instance(cf, rng, 3)
    critic = CfCritic(cf, MODEL, channel_rms(inst.h))
    with torch.no_grad():
        v = critic(inst)
        assert bool((v >= 0).all())
        perm = [3, 1, 0, 2]
        assert torch.allclose(critic(inst.channels()[:, perm]), v, atol=1e-12)
        for p in critic.parameters():
            p.zero_()
        assert torch.equal(critic(inst), torch.zeros(3, dtype=torch.float64))
    ma = MaConfig(side=3, M=2, K=2, d_min=0.07)
    mi = sample_ma_instance(ma, rng, 2)
    mc = MaCritic(ma, MODEL, channel_rms(mi.h))
    with torch.no_grad():
        assert mc(mi).shape == (2,) and bool((mc(mi) >= 0).all())
