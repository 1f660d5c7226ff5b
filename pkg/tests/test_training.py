import math

import numpy as np
import pytest
import torch

from mdra.config import ModelConfig, TrainConfig
from mdra.dvln import decode_support
from mdra.io import read_checkpoint, write_checkpoint
from mdra.numerics import backward, finite_diff_check
from mdra.scenarios.cf import CfConfig
from mdra.scenarios.ma import MaConfig
from mdra.tasks import make_task
from mdra.training import (
    Trainer,
    critic_step,
    cvln_gradient_batch,
    enumerate_sequences,
    exact_policy_gradient,
    make_adam,
    policy_gradient_batch,
)

TINY = ModelConfig(d_h=8, beamformer_width=8, encoder_layers=1, context_layers=1, beamformer_layers=1,
                   critic_layers=1, heads=2, batch_norm=False)
MA4 = MaConfig(side=2, M=2, K=2, d_min=0.01)


def ma_task(system=MA4, model=TINY):
    return make_task("ma", system, model)


def tiny_trainer(scenario="ma", lr=1e-3, seed=0, batch_norm=False, epochs=2):
    model = ModelConfig(**{**TINY.__dict__, "batch_norm": batch_norm})
    system = MaConfig(side=3, M=2, K=2, d_min=0.07) if scenario == "ma" else CfConfig(L=2, K=3, M=2, k_max=2, l_max=1)
    task = make_task(scenario, system, model)
    rng = np.random.default_rng(7)
    cfg = TrainConfig(epochs=epochs, steps_per_epoch=3, batch_size=8, lr=lr, seed=seed, val_batch=16)
    return Trainer(task, cfg, task.sample(rng, 32), task.sample(rng, 16))


def rows(history):
    return [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in m.row().items()} for m in history]


def rate_utility(task, inst, beamformer):
    def u(seq):
        bits = torch.zeros(1, task.system.N, dtype=torch.bool)
        bits[0, [a for a in seq if a < task.system.N]] = True
        with torch.no_grad():
            return float(task.rates(inst, bits, beamformer)[0])
    return u


def test_exact_policy_gradient_identity_and_mean_zero():
    task = ma_task()
    inst = task.sample(np.random.default_rng(0), 1)
    policy, beam, _ = task.build(task.channel_scale(inst))
    policy.eval()
    direct, score, enum = exact_policy_gradient(policy, inst, rate_utility(task, inst, beam))
    assert len(enum.sequences) == 12
    assert abs(float(enum.log_probs.detach().exp().sum()) - 1) < 1e-12
    for a, b in zip(direct, score):
        assert torch.allclose(a, b, atol=1e-8, rtol=0)
    d1, s1, _ = exact_policy_gradient(policy, inst, lambda s: 1.0)
    assert max(float(g.abs().max()) for g in s1) < 1e-8
    assert max(float(g.abs().max()) for g in d1) < 1e-8


def test_masked_candidates_never_enumerated():
    system = MaConfig(side=2, M=2, K=1, d_min=0.13)   # adjacent CPs conflict, diagonals do not
    task = ma_task(system)
    inst = task.sample(np.random.default_rng(1), 1)
    policy, _, _ = task.build(task.channel_scale(inst))
    enum = enumerate_sequences(policy.eval(), inst, lambda s: 1.0)
    assert sorted(tuple(sorted(s)) for s in enum.sequences) == [(0, 3), (0, 3), (1, 2), (1, 2)]


def test_policy_gradient_batch_examples():
    task = ma_task()
    inst = task.sample(np.random.default_rng(2), 3)
    policy, _, _ = task.build(task.channel_scale(inst))
    params = list(policy.parameters())
    g = torch.Generator().manual_seed(0)
    tr = decode_support(policy.eval(), inst, "sample", generator=g)
    u = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    assert all(float(x.abs().max()) == 0 for x in policy_gradient_batch(params, tr, u, u.clone()))

    one = inst[0]
    tr = decode_support(policy, one, "sample", generator=g)
    want = backward(tr.log_prob.sum(), params, retain_graph=True)
    got = policy_gradient_batch(params, tr, torch.tensor([2.5], dtype=torch.float64))
    for a, b in zip(got, want):
        assert torch.allclose(a, 2.5 * b, atol=1e-14)


def test_cvln_gradient_batch_duplicates_and_finite_differences():
    task = ma_task(MaConfig(side=3, M=2, K=2, d_min=0.07, noise=1e-9))   # moderate SNR keeps the solve well conditioned
    inst = task.sample(np.random.default_rng(3), 1)
    _, beam, _ = task.build(task.channel_scale(inst))
    bits = torch.zeros(1, 9, dtype=torch.bool)
    bits[0, [0, 8]] = True
    single = cvln_gradient_batch(task, inst, bits, beam)
    dup = cvln_gradient_batch(task, inst[[0, 0, 0]], bits.expand(3, 9), beam)
    for a, b in zip(single, dup):
        assert torch.allclose(a, b, atol=1e-12)
    assert sum(p.numel() for p in beam.parameters()) >= 300
    fn = lambda: task.rates(inst, bits, beam).mean()  # noqa: E731
    assert finite_diff_check(fn, list(beam.parameters()), step=1e-4, stencil=4, rel_floor=1e-3) < 1e-4


def test_cf_saturated_projection_gradient():
    task = make_task("cf", CfConfig(L=2, K=3, M=2, k_max=2, l_max=1), TINY)
    inst = task.sample(np.random.default_rng(4), 2)
    _, beam, _ = task.build(task.channel_scale(inst))
    with torch.no_grad():
        beam.head.bias.fill_(1.0)      # push every AP far above its budget
    bits = torch.tensor([[1, 0, 1, 0, 0, 1]] * 2, dtype=torch.bool)
    w = beam(inst.channels(), bits.view(2, 3, 2))
    assert torch.allclose((w.abs() ** 2).sum((1, 3)), torch.full((2, 2), task.system.p_max, dtype=torch.float64), atol=1e-12)
    fn = lambda: task.rates(inst, bits, beam).mean()  # noqa: E731
    assert finite_diff_check(fn, [beam.head.weight, beam.head.bias], step=1e-4, stencil=4, rel_floor=1e-3) < 1e-4


def test_critic_step_examples():
    task = ma_task()
    inst = task.sample(np.random.default_rng(5), 6)
    _, _, critic = task.build(task.channel_scale(inst))
    with torch.no_grad():
        u = critic(inst).clone()
    opt = make_adam(critic, 1e-3)
    loss, est = critic_step(critic, opt, inst, u)
    assert loss == 0.0 and all(float(p.grad.abs().max()) == 0 for p in critic.parameters() if p.grad is not None)

    target = torch.full((6,), 3.0, dtype=torch.float64)
    with torch.no_grad():
        hand = float(((critic(inst) - target) ** 2).mean())
    first, _ = critic_step(critic, opt, inst, target)
    assert abs(first - hand) < 1e-12
    for _ in range(100):
        last, _ = critic_step(critic, opt, inst, target)
    assert last < first


def test_epoch_zero_is_untrained_greedy_rate():
    t = tiny_trainer(epochs=1)
    rates, _, _ = t.evaluate(t.val_set)
    hist = t.fit()
    assert hist[0].epoch == 0 and hist[0].val_rate == float(rates.mean())
    assert [m.epoch for m in hist] == [0, 1]


def test_same_seed_same_curves():
    a = rows(tiny_trainer(scenario="cf", batch_norm=True).fit())
    b = rows(tiny_trainer(scenario="cf", batch_norm=True).fit())
    assert a == b


def test_zero_learning_rate_keeps_parameters_and_metrics():
    t = tiny_trainer(lr=0.0, epochs=3)
    before = {k: v.clone() for k, v in t.policy.state_dict().items()}
    beam = {k: v.clone() for k, v in t.beamformer.state_dict().items()}
    hist = t.fit()
    assert all(torch.equal(before[k], v) for k, v in t.policy.state_dict().items())
    assert all(torch.equal(beam[k], v) for k, v in t.beamformer.state_dict().items())
    assert len({m.val_rate for m in hist}) == 1 and len({m.assoc_rate if not math.isnan(m.assoc_rate) else 0 for m in hist}) == 1


def test_resume_replays_exactly(tmp_path):
    full = tiny_trainer(scenario="cf", batch_norm=True, epochs=3)
    full.fit()

    part = tiny_trainer(scenario="cf", batch_norm=True, epochs=3)
    part.fit(epochs=1)
    from mdra.training import restore_trainer, trainer_state

    arrays, meta = trainer_state(part)
    write_checkpoint(tmp_path / "m.ckpt", {}, "0" * 64, arrays, meta)
    _, _, arrays, meta = read_checkpoint(tmp_path / "m.ckpt")
    resumed = restore_trainer(tiny_trainer(scenario="cf", batch_norm=True, epochs=3), arrays, meta)
    resumed.fit()
    assert rows(resumed.history) == rows(full.history)
    for k, v in full.policy.state_dict().items():
        assert torch.equal(resumed.policy.state_dict()[k], v)


def test_pretraining_only_moves_beamformer():
    t = tiny_trainer(scenario="cf")
    t.cfg = TrainConfig(**{**t.cfg.__dict__, "pretrain_epochs": 1})
    pol = {k: v.clone() for k, v in t.policy.state_dict().items()}
    beam = {k: v.clone() for k, v in t.beamformer.state_dict().items()}
    t.pretrain()
    assert all(torch.equal(pol[k], v) for k, v in t.policy.state_dict().items())
    assert any(not torch.equal(beam[k], v) for k, v in t.beamformer.state_dict().items())


def test_critic_stays_non_negative_during_training():
    t = tiny_trainer()
    t.fit()
    with torch.no_grad():
        assert bool((t.critic(t.train_set) >= 0).all())
