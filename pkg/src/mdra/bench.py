"""Method evaluation shared by the CLI and the acceptance checks."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Any, Callable

import numpy as np
import torch
from torch import Tensor, nn

from .baselines import (
    WmmseConfig,
    brute_force_joint,
    greedy_association,
    greedy_positioning,
    random_positioning,
    supports_to_bits,
    wmmse_cf,
    wmmse_ma,
    zf_beamform,
)
from .cvln import random_feasible_support
from .problem import SupportSet, enumerate_all_feasible_supports, enumerate_feasible_supports
from .scenarios.cf import cf_blocked, cf_sum_rate
from .scenarios.common import watt_to_dbm
from .scenarios.ma import ma_sum_rate, selected_channel
from .tasks import CfTask, MaTask, Task

POWER_TOL = 1e-9

METHODS = {
    "cf": ("learned", "greedy+wmmse", "random+cvln", "brute-force"),
    "ma": ("learned", "greedy+wmmse", "greedy+zf", "random+wmmse", "random+cvln", "brute-force", "brute-force+cvln"),
}


@dataclass
class ResultRow:
    method: str
    p_max_dbm: float
    mean_rate: float
    std_err: float
    wall_ms: float
    feasibility: float
    axis: str = ""
    value: float = math.nan

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MethodOutput:
    rates: Tensor          # [B]
    feasible: Tensor       # [B] bool: discrete constraints and power budget
    seconds: float


def power_ok(task: Task, w: Tensor) -> Tensor:
    """Per-row check of the power budget: per AP (CF) or total (MA)."""
    p_max = task.system.p_max
    if isinstance(task, CfTask):
        power = (w.abs() ** 2).sum((1, 3))                         # [B, L]
        return (power <= p_max + POWER_TOL).all(-1)
    return (w.abs() ** 2).flatten(1).sum(-1) <= p_max + POWER_TOL


def _rate_with(task: Task, inst: Any, bits: Tensor, w: Tensor) -> Tensor:
    s = task.system
    if isinstance(task, CfTask):
        return cf_sum_rate(inst.channels(), bits.view(-1, s.K, s.L), w, s.noise)
    return ma_sum_rate(selected_channel(inst.channels(), bits), w, s.noise)


class Evaluator:
    """Runs named methods on a batch of test instances.

    ``policy`` and ``beamformer`` are only needed for the learned methods.
    """

    def __init__(
        self,
        task: Task,
        policy: nn.Module | None = None,
        beamformer: nn.Module | None = None,
        wmmse: WmmseConfig = WmmseConfig(),
        seed: int = 0,
        brute_budget: int = 10**4,
    ):
        self.task = task
        self.policy = policy
        self.beamformer = beamformer
        self.wmmse = wmmse
        self.seed = seed
        self.brute_budget = brute_budget
        self._supports: list[SupportSet] | None = None

    # -- building blocks
    def _beam_rates(self, inst: Any, bits: Tensor, solver: str) -> tuple[Tensor, Tensor]:
        """Rates and power check for fixed supports using ``solver`` in {wmmse, zf, cvln}."""
        s = self.task.system
        if solver == "cvln":
            if self.beamformer is None:
                raise ValueError("learned beamformer required")
            self.beamformer.eval()
            if isinstance(self.task, CfTask):
                w = self.beamformer(inst.channels(), bits.view(-1, s.K, s.L))
            else:
                w = self.beamformer(selected_channel(inst.channels(), bits))
        elif solver == "wmmse":
            if isinstance(self.task, CfTask):
                w = wmmse_cf(inst, bits, s, self.wmmse).w
            else:
                w = wmmse_ma(selected_channel(inst.channels(), bits), s, self.wmmse).w[:, :, 0, :]
        elif solver == "zf":
            w = zf_beamform(selected_channel(inst.channels(), bits), s.p_max)
        else:
            raise ValueError(f"unknown solver {solver!r}")
        return _rate_with(self.task, inst, bits, w), power_ok(self.task, w)

    def feasible_supports(self, inst: Any) -> list[SupportSet]:
        """All feasible supports for the (shared) CP grid / association structure."""
        if self._supports is None:
            t = self.task
            if isinstance(t, MaTask):
                self._supports = enumerate_feasible_supports(t.oracle, inst[0], t.system.M)
            else:
                self._supports = enumerate_all_feasible_supports(t.oracle, inst[0], t.system.max_support)
                self._supports = [x for x in self._supports if len(x) > 0]
        return self._supports

    def _brute(self, inst: Any, solver: str) -> tuple[Tensor, Tensor]:
        supports = self.feasible_supports(inst)
        rates, ok = [], []
        for i in range(len(inst)):
            one = inst[i]

            def solve(batch, bits):
                r, good = self._beam_rates(batch, bits, solver)
                return torch.where(good, r, torch.full_like(r, -math.inf))

            best = brute_force_joint(one, self.task.oracle, solve, (), self.brute_budget, supports)
            rates.append(best.rate)
            ok.append(math.isfinite(best.rate))
        return torch.tensor(rates), torch.tensor(ok)

    def _random_bits(self, inst: Any) -> Tensor:
        rng = np.random.default_rng(self.seed)
        t = self.task
        if isinstance(t, MaTask):
            return supports_to_bits(random_positioning(inst, t.system, rng))
        s = t.system
        out = []
        for i in range(len(inst)):
            out.append(
                random_feasible_support(
                    t.oracle, inst[i], rng, bound=s.max_support,
                    blocked=lambda b: cf_blocked(torch.as_tensor(b, dtype=torch.bool)[None], s)[0].numpy(),
                )
            )
        return supports_to_bits(out)

    def _greedy_bits(self, inst: Any) -> Tensor:
        t = self.task
        if isinstance(t, MaTask):
            return supports_to_bits(greedy_positioning(inst, t.system))
        return supports_to_bits(greedy_association(inst, t.system))

    # -- methods
    @torch.no_grad()
    def run(self, method: str, inst: Any) -> MethodOutput:
        t0 = time.perf_counter()
        if method == "learned":
            if self.policy is None:
                raise ValueError("the learned method needs a checkpoint")
            self.policy.eval()
            trace = self.task.decode(self.policy, inst, "greedy", on_dead_end="flag")
            bits = trace.bits
            rates, pw = self._beam_rates(inst, bits, "cvln") if not bool(trace.dead_end.any()) else self._learned_partial(inst, trace)
            feasible = self.task.feasible(inst, bits) & pw & ~trace.dead_end
        elif method in ("greedy+wmmse", "greedy+zf", "random+wmmse", "random+cvln"):
            pick, solver = method.split("+")
            if solver == "zf" and not isinstance(self.task, MaTask):
                raise ValueError("zero-forcing is only offered for the movable-antenna scenario")
            if pick == "random" and solver == "wmmse" and not isinstance(self.task, MaTask):
                raise ValueError("random+wmmse is only offered for the movable-antenna scenario")
            bits = self._greedy_bits(inst) if pick == "greedy" else self._random_bits(inst)
            rates, pw = self._beam_rates(inst, bits, solver)
            feasible = self.task.feasible(inst, bits) & pw
        elif method in ("brute-force", "brute-force+cvln"):
            rates, feasible = self._brute(inst, "cvln" if method.endswith("cvln") else "wmmse")
        else:
            raise ValueError(f"unknown method {method!r}")
        return MethodOutput(rates.double(), feasible, time.perf_counter() - t0)

    def _learned_partial(self, inst, trace) -> tuple[Tensor, Tensor]:
        ok = ~trace.dead_end
        rates = torch.zeros(len(inst), dtype=torch.float64)
        pw = torch.ones(len(inst), dtype=torch.bool)
        if bool(ok.any()):
            idx = torch.nonzero(ok).squeeze(1).numpy()
            r, p = self._beam_rates(inst[idx], trace.bits[ok], "cvln")
            rates[ok] = r
            pw[ok] = p
        return rates, pw

    def row(self, method: str, inst: Any, axis: str = "", value: float = math.nan) -> ResultRow:
        out = self.run(method, inst)
        n = len(inst)
        r = out.rates.numpy()
        se = float(r.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return ResultRow(
            method,
            watt_to_dbm(self.task.system.p_max),
            float(r.mean()),
            se,
            1000.0 * out.seconds / n,
            float(out.feasible.double().mean()),
            axis,
            value,
        )
