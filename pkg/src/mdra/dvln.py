"""Discrete-variable network: encoders, context embeddings and the masked sequential decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import torch
from torch import Tensor, nn

from .config import ModelConfig
from .nn.blocks import (
    ClippedAttention,
    Engnn,
    MlpFactory,
    MultiHeadAttention,
    TypedEdgeGnn,
    linear,
    masked_log_softmax,
)
from .numerics import CDTYPE, DTYPE
from .problem import DeadEndError
from .scenarios.cf import CfConfig, CfInstance, cf_blocked, cf_features
from .scenarios.ma import MaConfig, MaInstance, conflict_matrix, ma_blocked


@dataclass
class Prepared:
    """Per-batch quantities computed once before decoding."""

    emb: Tensor          # [B, N_b, d]
    keys: Tensor         # [B, N_b, d], W_K applied
    extra: dict[str, Tensor] = field(default_factory=dict)

    @property
    def batch(self) -> int:
        return self.emb.shape[0]


class Policy(nn.Module):
    """Common interface of the scenario-specific decoders."""

    n_b: int
    max_steps: int
    end_token: bool

    def prepare(self, inst: Any) -> Prepared:
        raise NotImplementedError

    def context(self, prep: Prepared, chosen: Tensor, t: int) -> Tensor:
        raise NotImplementedError

    def blocked(self, prep: Prepared, chosen: Tensor) -> Tensor:
        raise NotImplementedError

    def scores(self, prep: Prepared, ctx: Tensor) -> Tensor:
        u = self.attention(prep.keys, ctx)
        if self.end_token:
            u_end = self.attention(prep.extra["end_key"], ctx)
            u = torch.cat((u, u_end), dim=-1)
        return u


class CfPolicy(Policy):
    """UE-AP association decoder.

    Encoder: ENGNN with APs as TX nodes and UEs as RX nodes; the final edge
    features are the pair embeddings. Context: typed-edge GNN over
    (channel, embedding) edge inputs, read out as pooled node and edge
    projections.
    """

    end_token = True

    def __init__(self, system: CfConfig, mc: ModelConfig, channel_scale: float = 1.0):
        super().__init__()
        self.system = system
        self.n_b = system.n_b
        self.max_steps = system.max_support
        d = mc.d_h
        mlp = MlpFactory(d, mc.mlp_hidden, mc.batch_norm)
        self.register_buffer("channel_scale", torch.tensor(float(channel_scale), dtype=DTYPE))
        self.edge_in = mlp(2 * system.M)
        self.encoder = Engnn(d, mc.encoder_layers, mlp)
        self.ctx_gnn = TypedEdgeGnn(2 * system.M + d, d, mc.context_layers, mlp)
        self.ctx_ue, self.ctx_ap, self.ctx_edge = linear(d, d), linear(d, d), linear(d, d)
        self.attention = ClippedAttention(d, mc.clip)
        self.r_end = nn.Parameter(torch.empty(d, dtype=DTYPE).uniform_(-1, 1) * np.sqrt(6.0 / (2 * d)))
        self.d = d

    def encode(self, feats: Tensor) -> Tensor:
        B, K, L, _ = feats.shape
        edge = self.edge_in(feats).transpose(1, 2)  # [B, L, K, d]: APs transmit
        ap = edge.new_zeros(B, L, self.d)
        ue = edge.new_zeros(B, K, self.d)
        _, _, edge = self.encoder(ap, ue, edge)
        return edge.transpose(1, 2).reshape(B, K * L, self.d)

    def prepare(self, inst: CfInstance | Tensor) -> Prepared:
        h = inst.channels() if isinstance(inst, CfInstance) else inst
        feats = cf_features(h, float(self.channel_scale))
        emb = self.encode(feats)
        keys = self.attention.keys(emb)
        end_key = self.attention.keys(self.r_end).expand(emb.shape[0], 1, self.d)
        return Prepared(emb, keys, {"feats": feats, "end_key": end_key})

    def context(self, prep: Prepared, chosen: Tensor, t: int) -> Tensor:
        feats = prep.extra["feats"]
        B, K, L, _ = feats.shape
        x = torch.cat((feats, prep.emb.view(B, K, L, self.d)), dim=-1)
        ue, ap, edge = self.ctx_gnn(x, chosen.view(B, K, L))
        return self.ctx_ue(ue).mean(1) + self.ctx_ap(ap).mean(1) + self.ctx_edge(edge).mean((1, 2))

    def blocked(self, prep: Prepared, chosen: Tensor) -> Tensor:
        return cf_blocked(chosen, self.system)


class MaPolicy(Policy):
    """Antenna-position decoder.

    Encoder: ENGNN with CPs as TX nodes (initialized from coordinates) and
    UEs as RX nodes; final CP features are the embeddings. Context: mean of
    projected chosen embeddings (a learned vector before the first pick)
    combined with a pooled channel/position summary, refined by multi-head
    attention over all CP embeddings.
    """

    end_token = False

    def __init__(self, system: MaConfig, mc: ModelConfig, channel_scale: float = 1.0):
        super().__init__()
        self.system = system
        self.n_b = system.N
        self.max_steps = system.M
        d = mc.d_h
        mlp = MlpFactory(d, mc.mlp_hidden, mc.batch_norm)
        self.register_buffer("channel_scale", torch.tensor(float(channel_scale), dtype=DTYPE))
        self.edge_in = mlp(2)
        self.cp_in = mlp(2)
        self.encoder = Engnn(d, mc.encoder_layers, mlp)
        self.chosen_proj = mlp(d)
        self.merge = mlp(2 * d)
        self.channel_proj = mlp(2)
        self.cp_summary = mlp(2 + d)
        self.r_start = nn.Parameter(torch.empty(d, dtype=DTYPE).uniform_(-1, 1) * np.sqrt(6.0 / (2 * d)))
        self.mha = MultiHeadAttention(d, mc.heads)
        self.attention = ClippedAttention(d, mc.clip)
        self.d = d

    def features(self, h: Tensor, positions: Tensor) -> tuple[Tensor, Tensor]:
        hs = h / float(self.channel_scale)
        edge = torch.stack((hs.real, hs.imag), dim=-1)        # [B, K, N, 2]
        pos = positions / self.system.wavelength               # [B, N, 2]
        return edge, pos

    def encode(self, edge_feats: Tensor, pos: Tensor) -> Tensor:
        B, K, N, _ = edge_feats.shape
        edge = self.edge_in(edge_feats).transpose(1, 2)       # [B, N, K, d]: CPs transmit
        cp = self.cp_in(pos)
        ue = edge.new_zeros(B, K, self.d)
        cp, _, _ = self.encoder(cp, ue, edge)
        return cp

    def prepare(self, inst: MaInstance) -> Prepared:
        h = inst.channels()
        positions = torch.as_tensor(inst.positions, dtype=DTYPE)
        edge_feats, pos = self.features(h, positions)
        emb = self.encode(edge_feats, pos)
        keys = self.attention.keys(emb)
        per_cp = self.channel_proj(edge_feats).mean(1)         # [B, N, d]
        summary = self.cp_summary(pos, per_cp).mean(1)         # [B, d]
        extra = {
            "summary": summary,
            "chosen_proj": self.chosen_proj(emb),
            "conflicts": conflict_matrix(positions, self.system.d_min),
        }
        return Prepared(emb, keys, extra)

    def context(self, prep: Prepared, chosen: Tensor, t: int) -> Tensor:
        B = prep.batch
        count = chosen.sum(-1, keepdim=True)
        w = chosen.to(DTYPE)
        mean_chosen = torch.einsum("bn,bnd->bd", w, prep.extra["chosen_proj"]) / count.clamp(min=1)
        first = self.r_start.expand(B, self.d)
        pooled = torch.where(count > 0, mean_chosen, first)
        c = self.merge(pooled, prep.extra["summary"])
        return self.mha(c, prep.emb)

    def blocked(self, prep: Prepared, chosen: Tensor) -> Tensor:
        return ma_blocked(chosen, prep.extra["conflicts"], self.system.M)


@dataclass
class EpisodeTrace:
    """Batch of decoded supports with per-step log-probabilities.

    ``actions[b, t]`` is the index picked at step ``t`` (``n_b`` = end token,
    ``-1`` = episode already finished). ``logp[b, t]`` is zero after the
    episode ends, so ``log_prob`` is the log-likelihood of the ordered
    selection.
    """

    actions: Tensor
    logp: Tensor
    bits: Tensor
    dead_end: Tensor
    n_b: int
    probs: list[Tensor] | None = None
    masks: list[Tensor] | None = None
    utility: Tensor | None = None

    @property
    def log_prob(self) -> Tensor:
        return self.logp.sum(-1)

    @property
    def length(self) -> Tensor:
        return self.bits.sum(-1)

    @property
    def steps(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return self.actions.shape[0]

    def supports(self) -> list[list[int]]:
        """Ordered selections per episode (end token and padding dropped)."""
        out = []
        for row in self.actions.tolist():
            out.append([a for a in row if 0 <= a < self.n_b])
        return out


def decode_step(policy: Policy, prep: Prepared, chosen: Tensor, active: Tensor, t: int) -> tuple[Tensor, Tensor, Tensor]:
    """One decoding step: ``(log-probabilities, masked flags, scores)`` over candidates (and end token).

    Rows of finished episodes are left unmasked so the softmax is defined;
    their values are discarded by the caller.
    """
    ctx = policy.context(prep, chosen, t)
    scores = policy.scores(prep, ctx)
    masked = policy.blocked(prep, chosen)
    if policy.end_token:
        masked = torch.cat((masked, torch.zeros_like(masked[:, :1])), dim=-1)
    masked = masked & active.unsqueeze(-1)
    return masked_log_softmax(scores, masked), masked, scores


def decode_support(
    policy: Policy,
    inst: Any,
    mode: Literal["sample", "greedy"] = "greedy",
    generator: torch.Generator | None = None,
    on_dead_end: Literal["raise", "flag"] | None = None,
    record: bool = False,
    prep: Prepared | None = None,
) -> EpisodeTrace:
    """Build supports step by step.

    Sampling draws each element from the masked distribution; greedy takes
    the most probable one (lowest index on ties). Episodes stop at the end
    token, at the cardinality bound, or when every candidate is masked and
    there is no end token (dead end: raised in greedy mode by default,
    flagged otherwise).
    """
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown mode {mode!r}")
    if on_dead_end is None:
        on_dead_end = "raise" if mode == "greedy" else "flag"
    prep = policy.prepare(inst) if prep is None else prep
    B, n_b = prep.batch, policy.n_b
    device = prep.emb.device
    chosen = torch.zeros(B, n_b, dtype=torch.bool, device=device)
    active = torch.ones(B, dtype=torch.bool, device=device)
    dead = torch.zeros(B, dtype=torch.bool, device=device)
    actions, logps, probs, masks = [], [], [], []
    for t in range(1, policy.max_steps + 1):
        if not bool(active.any()):
            break
        if not policy.end_token:
            stuck = active & policy.blocked(prep, chosen).all(-1)
            if bool(stuck.any()):
                if on_dead_end == "raise":
                    raise DeadEndError(f"no feasible candidate at step {t}")
                dead |= stuck
                active &= ~stuck
                if not bool(active.any()):
                    break
        logp_all, masked, _ = decode_step(policy, prep, chosen, active, t)
        if mode == "sample":
            a = torch.multinomial(logp_all.detach().exp(), 1, generator=generator).squeeze(1)
        else:
            a = torch.argmax(logp_all.detach(), dim=-1)
        lp = logp_all.gather(1, a.unsqueeze(1)).squeeze(1)
        lp = torch.where(active, lp, torch.zeros_like(lp))
        actions.append(torch.where(active, a, torch.full_like(a, -1)))
        logps.append(lp)
        if record:
            probs.append(logp_all.detach().exp())
            masks.append(masked)
        picks = active & (a < n_b)
        chosen = chosen.clone()
        chosen[picks, a[picks]] = True
        if policy.end_token:
            active = active & (a < n_b)
        active = active & (chosen.sum(-1) < policy.max_steps)
    if actions:
        act = torch.stack(actions, 1)
        logp = torch.stack(logps, 1)
    else:
        act = torch.full((B, 0), -1, dtype=torch.long, device=device)
        logp = torch.zeros(B, 0, dtype=DTYPE, device=device)
    return EpisodeTrace(act, logp, chosen, dead, n_b, probs if record else None, masks if record else None)


def sequence_log_prob(policy: Policy, inst: Any, sequence: list[int], prep: Prepared | None = None) -> Tensor:
    """Log-probability of one ordered selection for a single-instance batch, recomputed step by step.

    ``sequence`` may end with the end-token index ``policy.n_b``.
    """
    prep = policy.prepare(inst) if prep is None else prep
    chosen = torch.zeros(1, policy.n_b, dtype=torch.bool)
    active = torch.ones(1, dtype=torch.bool)
    total = prep.emb.new_zeros(())
    for t, a in enumerate(sequence, start=1):
        logp_all, _, _ = decode_step(policy, prep, chosen, active, t)
        total = total + logp_all[0, a]
        if a == policy.n_b:
            break
        chosen = chosen.clone()
        chosen[0, a] = True
    return total
