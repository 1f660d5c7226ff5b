"""Continuous-variable networks: beamformers conditioned on a chosen support."""

from __future__ import annotations

from typing import Any, Callable

import numpy as np
import torch
from torch import Tensor, nn

from .config import ModelConfig
from .nn.blocks import Engnn, MlpFactory, TypedEdgeGnn, linear
from .numerics import DTYPE, hermitian_solve
from .problem import BudgetExceededError, FeasibilityOracle, SupportSet
from .scenarios.cf import CfConfig, cf_features
from .scenarios.ma import MaConfig


def per_ap_projection(w: Tensor, bits: Tensor, p_max: float) -> Tensor:
    """Gate by the association and scale each AP's beamformers onto the power budget.

    ``w [B, K, L, M]`` complex, ``bits [B, K, L]``. APs already within
    budget are left unchanged.
    """
    b = bits.to(w.real.dtype).unsqueeze(-1)
    wb = w * b
    power = (wb.real**2 + wb.imag**2).sum((1, 3))                     # [B, L]
    scale = np.sqrt(p_max) / torch.sqrt(torch.clamp(power, min=p_max))
    return wb * scale[:, None, :, None]


class CfBeamformer(nn.Module):
    """Typed-edge GNN over the association graph emitting one beamformer per UE-AP pair."""

    def __init__(self, system: CfConfig, mc: ModelConfig, channel_scale: float = 1.0):
        super().__init__()
        self.system = system
        d = mc.beamformer_width
        mlp = MlpFactory(d, mc.mlp_hidden, mc.batch_norm)
        self.register_buffer("channel_scale", torch.tensor(float(channel_scale), dtype=DTYPE))
        self.gnn = TypedEdgeGnn(2 * system.M, d, mc.beamformer_layers, mlp)
        self.head = linear(d, 2 * system.M)

    def raw(self, h: Tensor, bits: Tensor) -> Tensor:
        feats = cf_features(h, float(self.channel_scale))
        _, _, edge = self.gnn(feats, bits.bool())
        out = self.head(edge) * np.sqrt(self.system.p_max)
        M = self.system.M
        return torch.complex(out[..., :M], out[..., M:])

    def forward(self, h: Tensor, bits: Tensor) -> Tensor:
        return per_ap_projection(self.raw(h, bits), bits, self.system.p_max)


def optimal_structure_beamformer(h: Tensor, mu: Tensor, p: Tensor, noise: float) -> Tensor:
    """``w_k = sqrt(p_k) * normalize((I + sum_i mu_i h_i h_i^H / noise)^-1 h_k)``.

    ``h [B, K, M]`` (row k = h_k), ``mu, p [B, K]`` -> ``w [B, K, M]``.
    """
    hn = h / np.sqrt(noise)
    B, K, M = h.shape
    cols = hn.transpose(1, 2)                                          # [B, M, K]
    A = torch.einsum("bmk,bk,bnk->bmn", cols, mu.to(cols.dtype), cols.conj())
    A = A + torch.eye(M, dtype=cols.dtype)
    x = hermitian_solve(A, cols)                                       # [B, M, K]
    norm = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    direction = x / norm
    return (direction * torch.sqrt(p).unsqueeze(1)).transpose(1, 2)


class MaBeamformer(nn.Module):
    """ENGNN over the selected antennas (TX) and UEs (RX) predicting the optimal-structure weights."""

    def __init__(self, system: MaConfig, mc: ModelConfig, channel_scale: float = 1.0):
        super().__init__()
        self.system = system
        d = mc.beamformer_width
        self.d = d
        mlp = MlpFactory(d, mc.mlp_hidden, mc.batch_norm)
        self.register_buffer("channel_scale", torch.tensor(float(channel_scale), dtype=DTYPE))
        self.edge_in = mlp(2)
        self.gnn = Engnn(d, mc.beamformer_layers, mlp)
        self.head = linear(d, 2)

    def weights(self, h_sel: Tensor) -> tuple[Tensor, Tensor]:
        """Power-normalized ``(mu, p)``, each ``[B, K]`` summing to ``p_max``."""
        hs = h_sel / float(self.channel_scale)
        B, K, M = hs.shape
        edge = self.edge_in(torch.stack((hs.real, hs.imag), -1).transpose(1, 2))  # [B, M, K, d]
        tx = edge.new_zeros(B, M, self.d)
        rx = edge.new_zeros(B, K, self.d)
        _, rx, _ = self.gnn(tx, rx, edge)
        out = self.head(rx)
        p_max = self.system.p_max
        return p_max * torch.softmax(out[..., 0], -1), p_max * torch.softmax(out[..., 1], -1)

    def forward(self, h_sel: Tensor) -> Tensor:
        mu, p = self.weights(h_sel)
        return optimal_structure_beamformer(h_sel, mu, p, self.system.noise)


def random_feasible_support(
    oracle: FeasibilityOracle,
    inst: Any,
    rng: np.random.Generator,
    cardinality: int | None = None,
    bound: int | None = None,
    blocked: Callable[[np.ndarray], np.ndarray] | None = None,
    max_restarts: int = 10**4,
) -> SupportSet:
    """Sequential uniform choice among unblocked candidates, restarted on dead ends.

    Without ``cardinality`` the target size is drawn uniformly from
    ``[1, bound]``. ``blocked(bits)`` returns the candidates that may not
    be added; by default it re-evaluates the oracle on every extension.
    """
    n = oracle.n
    if cardinality is None:
        cardinality = int(rng.integers(1, (bound or n) + 1))
    if blocked is None:
        def blocked(bits):
            out = bits.astype(bool).copy()
            for i in np.flatnonzero(~out):
                trial = bits.copy()
                trial[i] = 1
                out[i] = not oracle.is_feasible(trial, inst, complete=False)
            return out

    for _ in range(max_restarts):
        bits = np.zeros(n, dtype=np.int8)
        order = []
        for _ in range(cardinality):
            free = np.flatnonzero(~blocked(bits))
            if free.size == 0:
                break
            pick = int(rng.choice(free))
            bits[pick] = 1
            order.append(pick)
        if len(order) == cardinality and oracle.is_feasible(bits, inst, complete=True):
            return SupportSet(n, order)
    raise BudgetExceededError(f"no feasible support of size {cardinality} after {max_restarts} restarts")


def random_support_batch(
    blocked: Callable[[Tensor, Tensor], Tensor],
    counts: Tensor,
    n_b: int,
    generator: torch.Generator | None = None,
    max_restarts: int = 10**4,
) -> Tensor:
    """Batched version for training: ``[B, n_b]`` bool supports with ``counts[b]`` elements each.

    ``blocked(chosen, rows)`` gives the blocked mask for the listed rows.
    Rows that run out of candidates are restarted.
    """
    B = counts.shape[0]
    out = torch.zeros(B, n_b, dtype=torch.bool)
    todo = torch.arange(B)
    for _ in range(max_restarts):
        if todo.numel() == 0:
            return out
        chosen = torch.zeros(todo.numel(), n_b, dtype=torch.bool)
        ok = torch.ones(todo.numel(), dtype=torch.bool)
        target = counts[todo]
        for t in range(int(target.max())):
            need = ok & (target > t)
            if not bool(need.any()):
                break
            free = ~blocked(chosen, todo)
            stuck = need & ~free.any(-1)
            ok &= ~stuck
            need &= ~stuck
            if not bool(need.any()):
                continue
            weights = free[need].to(torch.float64)
            pick = torch.multinomial(weights, 1, generator=generator).squeeze(1)
            rows = torch.nonzero(need).squeeze(1)
            chosen[rows, pick] = True
        out[todo[ok]] = chosen[ok]
        todo = todo[~ok]
    raise BudgetExceededError(f"{todo.numel()} rows without a feasible support after {max_restarts} restarts")
