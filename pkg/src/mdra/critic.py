"""Utility estimator used as the policy-gradient baseline."""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .nn.blocks import Engnn, MlpFactory, linear
from .numerics import DTYPE
from .scenarios.cf import CfConfig, CfInstance, cf_features
from .scenarios.ma import MaConfig, MaInstance


class Critic(nn.Module):
    """ENGNN followed by three scalar read-outs (TX nodes, RX nodes, edges), mean-pooled, summed and rectified."""

    def __init__(self, d_edge: int, d_tx: int | None, mc: ModelConfig, channel_scale: float = 1.0):
        super().__init__()
        d = mc.d_h
        self.d = d
        mlp = MlpFactory(d, mc.mlp_hidden, mc.batch_norm)
        self.register_buffer("channel_scale", torch.tensor(float(channel_scale), dtype=DTYPE))
        self.edge_in = mlp(d_edge)
        self.tx_in = mlp(d_tx) if d_tx else None
        self.gnn = Engnn(d, mc.critic_layers, mlp)
        self.head_tx, self.head_rx, self.head_edge = linear(d, 1), linear(d, 1), linear(d, 1)
        # start inside the active region of the output rectifier
        nn.init.constant_(self.head_edge.bias, 1.0)

    def value(self, edge_feats: Tensor, tx_feats: Tensor | None = None) -> Tensor:
        """``edge_feats [B, NT, NR, d_edge]`` -> ``[B]`` non-negative estimates."""
        B, NT, NR, _ = edge_feats.shape
        edge = self.edge_in(edge_feats)
        tx = self.tx_in(tx_feats) if self.tx_in is not None else edge.new_zeros(B, NT, self.d)
        rx = edge.new_zeros(B, NR, self.d)
        tx, rx, edge = self.gnn(tx, rx, edge)
        total = (
            self.head_tx(tx).mean((1, 2))
            + self.head_rx(rx).mean((1, 2))
            + self.head_edge(edge).mean((1, 2, 3))
        )
        return torch.relu(total)


class CfCritic(Critic):
    def __init__(self, system: CfConfig, mc: ModelConfig, channel_scale: float = 1.0):
        super().__init__(2 * system.M, None, mc, channel_scale)

    def forward(self, inst: CfInstance | Tensor) -> Tensor:
        h = inst.channels() if isinstance(inst, CfInstance) else inst
        feats = cf_features(h, float(self.channel_scale)).transpose(1, 2)  # APs transmit
        return self.value(feats)


class MaCritic(Critic):
    def __init__(self, system: MaConfig, mc: ModelConfig, channel_scale: float = 1.0):
        super().__init__(2, 2, mc, channel_scale)
        self.wavelength = system.wavelength

    def forward(self, inst: MaInstance) -> Tensor:
        hs = inst.channels() / float(self.channel_scale)
        edge = torch.stack((hs.real, hs.imag), -1).transpose(1, 2)          # [B, N, K, 2]
        pos = torch.as_tensor(inst.positions, dtype=DTYPE) / self.wavelength
        return self.value(edge, pos)
