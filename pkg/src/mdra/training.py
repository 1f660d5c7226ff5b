"""Joint training of the decoder, the beamformer and the critic."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .config import TrainConfig
from .dvln import EpisodeTrace, Policy, decode_step, decode_support
from .numerics import backward
from .problem import BudgetExceededError
from .tasks import Task

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def make_adam(module: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def policy_loss(trace: EpisodeTrace, utility: Tensor, baseline: Tensor | None = None) -> Tensor:
    """Surrogate whose gradient is ``-(1/B) sum (U - U_hat) grad log p``."""
    adv = utility.detach() if baseline is None else (utility - baseline).detach()
    return -(adv * trace.log_prob).mean()


def policy_gradient_batch(
    params: Sequence[Tensor], trace: EpisodeTrace, utility: Tensor, baseline: Tensor | None = None
) -> list[Tensor]:
    """Ascent direction ``(1/B) sum (U - U_hat) grad log p(A|h)``."""
    return [-g for g in backward(policy_loss(trace, utility, baseline), params)]


@dataclass
class Enumeration:
    sequences: list[list[int]]
    log_probs: Tensor      # [S], attached to the policy graph
    utilities: Tensor      # [S]


def enumerate_sequences(
    policy: Policy, inst: Any, utility: Callable[[list[int]], float], budget: int = 10**5
) -> Enumeration:
    """Every ordered selection the decoder can emit on a single instance, with its log-probability.

    A branch ends at the end token, at the step bound, or at a dead end
    (utility still comes from ``utility``, which sees the partial sequence).
    """
    prep = policy.prepare(inst)
    n_b = policy.n_b
    seqs: list[list[int]] = []
    logps: list[Tensor] = []

    def walk(prefix: list[int], chosen: Tensor, logp: Tensor):
        if len(seqs) > budget:
            raise BudgetExceededError(f"more than {budget} sequences")
        finished = bool(prefix) and prefix[-1] == n_b
        full = chosen.sum() >= policy.max_steps
        stuck = not policy.end_token and bool(policy.blocked(prep, chosen).all())
        if finished or full or stuck:
            seqs.append(prefix)
            logps.append(logp)
            return
        step_logp, masked, _ = decode_step(policy, prep, chosen, torch.ones(1, dtype=torch.bool), len(prefix) + 1)
        for a in torch.nonzero(~masked[0]).squeeze(1).tolist():
            nxt = chosen.clone()
            if a < n_b:
                nxt[0, a] = True
            walk(prefix + [a], nxt, logp + step_logp[0, a])

    walk([], torch.zeros(1, n_b, dtype=torch.bool), prep.emb.new_zeros(()))
    utilities = torch.tensor([float(utility(s)) for s in seqs], dtype=prep.emb.dtype)
    return Enumeration(seqs, torch.stack(logps), utilities)


def exact_policy_gradient(
    policy: Policy, inst: Any, utility: Callable[[list[int]], float], budget: int = 10**5
) -> tuple[list[Tensor], list[Tensor], Enumeration]:
    """Gradient of the expected utility computed two ways.

    Returns ``(grad of sum p U, sum p U grad log p, enumeration)``: the
    first differentiates the enumerated mixture directly, the second is the
    score-function form with probabilities held constant.
    """
    params = [p for p in policy.parameters() if p.requires_grad]
    enum = enumerate_sequences(policy, inst, utility, budget)
    p = enum.log_probs.exp()
    direct = backward((p * enum.utilities).sum(), params, retain_graph=True)
    score = backward((p.detach() * enum.utilities * enum.log_probs).sum(), params)
    return direct, score, enum


def cvln_gradient_batch(task: Task, inst: Any, bits: Tensor, beamformer: nn.Module) -> list[Tensor]:
    """Gradient of the batch-mean sum rate w.r.t. the beamformer parameters."""
    params = [p for p in beamformer.parameters() if p.requires_grad]
    return backward(task.rates(inst, bits, beamformer).mean(), params)


def critic_step(critic: nn.Module, opt: torch.optim.Optimizer, inst: Any, utility: Tensor, grad_clip: float | None = None) -> tuple[float, Tensor]:
    """One Adam step on the mean squared error; returns the loss before the step and the estimates."""
    estimate = critic(inst)
    loss = ((estimate - utility.detach()) ** 2).mean()
    opt.zero_grad()
    loss.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(critic.parameters(), grad_clip)
    opt.step()
    return float(loss.detach()), estimate.detach()


@dataclass
class EpochMetrics:
    epoch: int
    train_rate: float
    val_rate: float
    assoc_rate: float
    critic_loss: float
    seconds: float = 0.0

    def row(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_rate": self.train_rate,
            "val_rate": self.val_rate,
            "assoc_rate": self.assoc_rate,
            "critic_loss": self.critic_loss,
        }


def epoch_streams(seed: int, epoch: int, tag: int = 0) -> tuple[np.random.Generator, torch.Generator]:
    """Independent random streams for one epoch, so a resumed run replays exactly."""
    rng = np.random.default_rng([seed, tag, epoch])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return rng, gen


def set_mode(training: bool, *modules: nn.Module) -> None:
    for m in modules:
        m.train(training)


@dataclass
class Trainer:
    """Holds the three networks and their optimizers; ``fit`` runs the epoch loop."""

    task: Task
    cfg: TrainConfig
    train_set: Any
    val_set: Any
    channel_scale: float | None = None
    epoch: int = 0
    pretrained: bool = False
    history: list[EpochMetrics] = field(default_factory=list)

    def __post_init__(self):
        if self.channel_scale is None:
            self.channel_scale = self.task.channel_scale(self.train_set)
        torch.manual_seed(self.cfg.seed)
        self.policy, self.beamformer, self.critic = self.task.build(self.channel_scale)
        self.opt_policy = make_adam(self.policy, self.cfg.lr)
        self.opt_beam = make_adam(self.beamformer, self.cfg.lr)
        self.opt_critic = make_adam(self.critic, self.cfg.lr)

    @property
    def modules(self) -> dict[str, nn.Module]:
        return {"policy": self.policy, "beamformer": self.beamformer, "critic": self.critic}

    @property
    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"policy": self.opt_policy, "beamformer": self.opt_beam, "critic": self.opt_critic}

    def _update(self, opt: torch.optim.Optimizer, module: nn.Module, loss: Tensor) -> None:
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(module.parameters(), self.cfg.grad_clip)
        opt.step()

    def batches(self, rng: np.random.Generator):
        n = len(self.train_set)
        B = self.cfg.batch_size
        order = rng.permutation(n)
        pos = 0
        for _ in range(self.cfg.steps_per_epoch):
            if pos + B > n:
                order = np.concatenate((order[pos:], rng.permutation(n)))
                pos = 0
            yield self.train_set[order[pos : pos + B]]
            pos += B

    def step(self, inst: Any, gen: torch.Generator) -> tuple[float, float, bool]:
        """One iteration: sample supports, then update beamformer, decoder and critic on the same batch."""
        set_mode(True, self.policy, self.beamformer, self.critic)
        trace = self.task.decode(self.policy, inst, "sample", gen, on_dead_end="flag")
        bits = trace.bits
        if not bool(self.task.feasible(inst, bits)[~trace.dead_end].all()):
            raise AssertionError("decoder emitted an infeasible support")
        rates = self.task.rates(inst, bits, self.beamformer)
        utility = rates.detach()
        if bool((bits.sum(-1) > 0).any()) and rates.requires_grad:
            self._update(self.opt_beam, self.beamformer, -rates.mean())
        estimate = self.critic(inst)
        self._update(self.opt_policy, self.policy, policy_loss(trace, utility, estimate.detach()))
        critic_loss = ((estimate - utility) ** 2).mean()
        self._update(self.opt_critic, self.critic, critic_loss)
        return float(utility.mean()), float(critic_loss.detach()), bool(trace.dead_end.any())

    def pretrain_step(self, inst: Any, gen: torch.Generator) -> float:
        """Beamformer-only update on random feasible supports."""
        self.beamformer.train()
        bits = self.task.random_supports(inst, gen)
        rates = self.task.rates(inst, bits, self.beamformer)
        self._update(self.opt_beam, self.beamformer, -rates.mean())
        return float(rates.mean().detach())

    @torch.no_grad()
    def evaluate(self, inst: Any) -> tuple[Tensor, Tensor, Tensor]:
        """Greedy decode + beamformer in inference mode: ``(rates, bits, feasible)``."""
        set_mode(False, self.policy, self.beamformer)
        trace = self.task.decode(self.policy, inst, "greedy", on_dead_end="flag")
        rates = self.task.rates(inst, trace.bits, self.beamformer)
        feasible = self.task.feasible(inst, trace.bits) & ~trace.dead_end
        return rates, trace.bits, feasible

    def validate(self) -> tuple[float, float]:
        rates, bits, _ = self.evaluate(self.val_set)
        return float(rates.mean()), self.task.assoc_rate(bits)

    def pretrain(self) -> None:
        for e in range(self.cfg.pretrain_epochs):
            rng, gen = epoch_streams(self.cfg.seed, e, tag=1)
            for inst in self.batches(rng):
                self.pretrain_step(inst, gen)
        self.pretrained = True

    def run_epoch(self) -> EpochMetrics:
        t0 = time.perf_counter()
        rng, gen = epoch_streams(self.cfg.seed, self.epoch + 1)
        rates, losses = [], []
        for inst in self.batches(rng):
            r, c, _ = self.step(inst, gen)
            rates.append(r)
            losses.append(c)
        self.epoch += 1
        val, assoc = self.validate()
        m = EpochMetrics(self.epoch, float(np.mean(rates)), val, assoc, float(np.mean(losses)), time.perf_counter() - t0)
        self.history.append(m)
        return m

    def initial_metrics(self) -> EpochMetrics:
        val, assoc = self.validate()
        return EpochMetrics(0, math.nan, val, assoc, math.nan)

    def fit(self, epochs: int | None = None, on_epoch: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
        """Train up to ``epochs`` total epochs (default from the config); resumes from ``self.epoch``."""
        target = self.cfg.epochs if epochs is None else epochs
        if not self.pretrained and self.cfg.pretrain_epochs:
            self.pretrain()
        if self.epoch == 0 and not self.history:
            self.history.append(self.initial_metrics())
        while self.epoch < target:
            m = self.run_epoch()
            if on_epoch:
                on_epoch(m)
        return self.history


def train(task: Task, cfg: TrainConfig, train_set: Any, val_set: Any, on_epoch=None) -> Trainer:
    trainer = Trainer(task, cfg, train_set, val_set)
    trainer.fit(on_epoch=on_epoch)
    return trainer


def trainer_state(trainer: Trainer) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Everything needed to resume: weights, normalization buffers, Adam moments, epoch and history."""
    arrays: dict[str, np.ndarray] = {}
    for name, module in trainer.modules.items():
        for key, t in module.state_dict().items():
            arrays[f"{name}/{key}"] = t.detach().double().numpy()
    for name, opt in trainer.optimizers.items():
        for idx, st in opt.state_dict()["state"].items():
            for key, t in st.items():
                arrays[f"adam.{name}/{idx}/{key}"] = torch.as_tensor(t).detach().double().numpy()
    meta = {
        "epoch": trainer.epoch,
        "pretrained": trainer.pretrained,
        "channel_scale": trainer.channel_scale,
        "history": [m.row() | {"seconds": m.seconds} for m in trainer.history],
    }
    return arrays, meta


def restore_trainer(trainer: Trainer, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> Trainer:
    for name, module in trainer.modules.items():
        prefix = f"{name}/"
        state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
        module.load_state_dict(state)
    for name, opt in trainer.optimizers.items():
        sd = opt.state_dict()
        prefix = f"adam.{name}/"
        state: dict[int, dict[str, Tensor]] = {}
        for k, v in arrays.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split("/")
                t = torch.from_numpy(v)
                state.setdefault(int(idx), {})[key] = t.float() if key == "step" else t
        sd["state"] = state
        opt.load_state_dict(sd)
    trainer.epoch = int(meta["epoch"])
    trainer.pretrained = bool(meta["pretrained"])
    trainer.history = [
        EpochMetrics(int(r["epoch"]), r["train_rate"], r["val_rate"], r["assoc_rate"], r["critic_loss"], r.get("seconds", 0.0))
        for r in meta["history"]
    ]
    return trainer
