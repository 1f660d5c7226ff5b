"""Scenario adapters: everything the trainer and the CLI need to know about CF vs MA."""

from __future__ import annotations

from typing import Any

import numpy as np
import torch
from torch import Tensor, nn

from .config import ModelConfig
from .critic import CfCritic, MaCritic
from .cvln import CfBeamformer, MaBeamformer, random_support_batch
from .dvln import CfPolicy, EpisodeTrace, MaPolicy, decode_support
from .scenarios.cf import (
    CfConfig,
    CfInstance,
    cf_blocked,
    cf_constraint_oracle,
    cf_sum_rate,
    channel_rms,
    sample_cf_instance,
)
from .scenarios.ma import (
    MaConfig,
    MaInstance,
    conflict_matrix,
    ma_blocked,
    ma_constraint_oracle,
    ma_sum_rate,
    sample_ma_instance,
    selected_channel,
)


class Task:
    name: str
    system: Any

    def __init__(self, system, model: ModelConfig):
        self.system = system
        self.model = model
        self.oracle = self.make_oracle()

    # -- data
    def sample(self, rng: np.random.Generator, n: int):
        raise NotImplementedError

    def channel_scale(self, inst) -> float:
        return channel_rms(inst.h)

    # -- networks
    def build(self, channel_scale: float) -> tuple[nn.Module, nn.Module, nn.Module]:
        """Fresh ``(policy, beamformer, critic)`` sharing one input scale."""
        raise NotImplementedError

    def decode(self, policy, inst, mode="greedy", generator=None, on_dead_end=None) -> EpisodeTrace:
        return decode_support(policy, inst, mode, generator, on_dead_end)

    # -- evaluation
    def rates(self, inst, bits: Tensor, beamformer: nn.Module) -> Tensor:
        raise NotImplementedError

    def feasible(self, inst, bits: Tensor) -> Tensor:
        raise NotImplementedError

    def random_supports(self, inst, generator: torch.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def assoc_rate(self, bits: Tensor) -> float:
        return float("nan")

    def make_oracle(self):
        raise NotImplementedError


class CfTask(Task):
    name = "cf"
    system: CfConfig

    def sample(self, rng, n):
        return sample_cf_instance(self.system, rng, n)

    def build(self, channel_scale):
        s, m = self.system, self.model
        return CfPolicy(s, m, channel_scale), CfBeamformer(s, m, channel_scale), CfCritic(s, m, channel_scale)

    def make_oracle(self):
        return cf_constraint_oracle(self.system)

    def beamform(self, inst: CfInstance, bits: Tensor, beamformer: CfBeamformer) -> Tensor:
        s = self.system
        return beamformer(inst.channels(), bits.view(-1, s.K, s.L))

    def rates(self, inst, bits, beamformer):
        s = self.system
        b = bits.view(-1, s.K, s.L)
        w = beamformer(inst.channels(), b)
        return cf_sum_rate(inst.channels(), b, w, s.noise)

    def feasible(self, inst, bits):
        s = self.system
        b = bits.view(-1, s.K, s.L).long()
        return (b.sum(1) <= s.k_max).all(-1) & (b.sum(2) <= s.l_max).all(-1)

    def random_supports(self, inst, generator=None):
        B = len(inst)
        counts = torch.randint(1, self.system.max_support + 1, (B,), generator=generator)
        return random_support_batch(lambda c, _rows: cf_blocked(c, self.system), counts, self.system.n_b, generator)

    def assoc_rate(self, bits):
        return float(bits.sum(-1).double().mean()) / self.system.max_support


class MaTask(Task):
    name = "ma"
    system: MaConfig

    def sample(self, rng, n):
        return sample_ma_instance(self.system, rng, n)

    def build(self, channel_scale):
        s, m = self.system, self.model
        return MaPolicy(s, m, channel_scale), MaBeamformer(s, m, channel_scale), MaCritic(s, m, channel_scale)

    def make_oracle(self):
        return ma_constraint_oracle(self.system)

    def rates(self, inst, bits, beamformer):
        """Sum rate per row; rows without ``M`` antennas (dead ends) score 0 and carry no gradient."""
        s = self.system
        h = inst.channels()
        full = bits.sum(-1) == s.M
        out = torch.zeros(bits.shape[0], dtype=h.real.dtype)
        if bool(full.any()):
            h_sel = selected_channel(h[full], bits[full])
            out = out.masked_scatter(full, ma_sum_rate(h_sel, beamformer(h_sel), s.noise))
        return out

    def feasible(self, inst, bits):
        conflicts = conflict_matrix(inst.positions, self.system.d_min)
        b = bits.bool()
        clash = (conflicts & b.unsqueeze(1) & b.unsqueeze(2)).flatten(1).any(-1)
        return (b.sum(-1) == self.system.M) & ~clash

    def random_supports(self, inst, generator=None):
        conflicts = conflict_matrix(inst.positions, self.system.d_min)
        counts = torch.full((len(inst),), self.system.M)
        return random_support_batch(
            lambda c, rows: ma_blocked(c, conflicts[rows], self.system.M), counts, self.system.N, generator
        )


def make_task(scenario: str, system, model: ModelConfig) -> Task:
    if scenario == "cf":
        return CfTask(system, model)
    if scenario == "ma":
        return MaTask(system, model)
    raise ValueError(f"unknown scenario {scenario!r}")
