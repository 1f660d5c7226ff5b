"""Reusable network pieces: MLPs, ENGNN layers, attention and masked softmax."""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import Tensor, nn

from ..numerics import DTYPE


def init_linear(layer: nn.Linear) -> nn.Linear:
    # symmetric uniform init, zero bias
    bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
    nn.init.uniform_(layer.weight, -bound, bound)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def linear(d_in: int, d_out: int, bias: bool = True) -> nn.Linear:
    return init_linear(nn.Linear(d_in, d_out, bias=bias, dtype=DTYPE))


class BatchNorm(nn.Module):
    """Per-feature batch normalization over every leading axis.

    Unlike ``nn.BatchNorm1d`` a single-row batch is accepted in training
    mode (its normalized output is zero and running statistics are left
    untouched), which happens when only one edge of a given type exists.
    """

    def __init__(self, width: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(width, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(width, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(width, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        flat = x.reshape(-1, x.shape[-1])
        if self.training:
            var, mean = torch.var_mean(flat, dim=0, correction=0)
            n = flat.shape[0]
            if n > 1:
                with torch.no_grad():
                    self.running_mean.lerp_(mean.detach(), self.momentum)
                    self.running_var.lerp_(var.detach() * n / (n - 1), self.momentum)
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class MLP(nn.Module):
    """``hidden`` blocks of Linear (+ BatchNorm) + ReLU followed by a linear output layer."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        width: int,
        hidden: int = 2,
        batch_norm: bool = True,
    ):
        super().__init__()
        if hidden < 0 or min(d_in, d_out, width) <= 0:
            raise ValueError("MLP widths must be positive")
        self.layers = nn.ModuleList()
        self.norms = nn.ModuleList()
        d = d_in
        for _ in range(hidden):
            self.layers.append(linear(d, width))
            self.norms.append(BatchNorm(width) if batch_norm else nn.Identity())
            d = width
        self.out = linear(d, d_out)

    def forward(self, *xs: Tensor) -> Tensor:
        x = xs[0] if len(xs) == 1 else torch.cat(xs, dim=-1)
        for lin, norm in zip(self.layers, self.norms):
            x = torch.relu(norm(lin(x)))
        return self.out(x)


class MlpFactory:
    """Builds the MLPs of one network with a shared hidden width and BN policy."""

    def __init__(self, width: int, hidden: int = 2, batch_norm: bool = True):
        self.width = width
        self.hidden = hidden
        self.batch_norm = batch_norm

    def __call__(self, d_in: int, d_out: int | None = None) -> MLP:
        return MLP(d_in, self.width if d_out is None else d_out, self.width, self.hidden, self.batch_norm)


class EngnnLayer(nn.Module):
    """One edge-node GNN update on a complete bipartite TX/RX graph.

    Shapes: ``tx [B, NT, d]``, ``rx [B, NR, d]``, ``edge [B, NT, NR, d]``.
    Node updates aggregate MLP messages by mean over the opposite side; the
    edge update combines the mean over edges sharing its RX node and the
    mean over edges sharing its TX node. All inputs come from the previous
    layer.
    """

    def __init__(self, d: int, mlp: MlpFactory):
        super().__init__()
        self.d = d
        self.msg_to_tx = mlp(2 * d)   # (f_RX, e)
        self.upd_tx = mlp(2 * d)      # (f_TX, mean)
        self.msg_to_rx = mlp(2 * d)   # (f_TX, e)
        self.upd_rx = mlp(2 * d)      # (f_RX, mean)
        self.edge_col = mlp(2 * d)    # (e_{n' r}, f_RX)
        self.edge_row = mlp(2 * d)    # (e_{t n'}, f_TX)
        self.upd_edge = mlp(3 * d)    # (e, col mean, row mean)

    def forward(self, tx: Tensor, rx: Tensor, edge: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        B, NT, NR, d = edge.shape
        if tx.shape != (B, NT, d) or rx.shape != (B, NR, d):
            raise ValueError(
                f"shape mismatch: tx {tuple(tx.shape)}, rx {tuple(rx.shape)}, edge {tuple(edge.shape)}"
            )
        rx_b = rx.unsqueeze(1).expand(B, NT, NR, d)
        tx_b = tx.unsqueeze(2).expand(B, NT, NR, d)

        tx_new = self.upd_tx(tx, self.msg_to_tx(rx_b, edge).mean(2))
        rx_new = self.upd_rx(rx, self.msg_to_rx(tx_b, edge).mean(1))

        col = self.edge_col(edge, rx_b).mean(1, keepdim=True).expand(B, NT, NR, d)
        row = self.edge_row(edge, tx_b).mean(2, keepdim=True).expand(B, NT, NR, d)
        edge_new = self.upd_edge(edge, col, row)
        return tx_new, rx_new, edge_new


class Engnn(nn.Module):
    def __init__(self, d: int, n_layers: int, mlp: MlpFactory):
        super().__init__()
        self.layers = nn.ModuleList(EngnnLayer(d, mlp) for _ in range(n_layers))

    def forward(self, tx: Tensor, rx: Tensor, edge: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        for layer in self.layers:
            tx, rx, edge = layer(tx, rx, edge)
        return tx, rx, edge


class ClippedAttention(nn.Module):
    """Compatibility ``C * tanh(q.k / sqrt(d))`` with ``q = W_Q c`` and ``k = W_K r``."""

    def __init__(self, d: int, clip: float = 8.0):
        super().__init__()
        if clip <= 0:
            raise ValueError("clip constant must be positive")
        self.d = d
        self.clip = clip
        self.w_q = linear(d, d, bias=False)
        self.w_k = linear(d, d, bias=False)

    def keys(self, emb: Tensor) -> Tensor:
        return self.w_k(emb)

    def forward(self, keys: Tensor, context: Tensor) -> Tensor:
        """``keys [B, N, d]`` (already projected), ``context [B, d]`` -> scores ``[B, N]``."""
        q = self.w_q(context)
        return self.clip * torch.tanh(torch.einsum("bnd,bd->bn", keys, q) / math.sqrt(self.d))

    def score(self, emb: Tensor, context: Tensor) -> Tensor:
        return self(self.keys(emb), context)


class AllMaskedError(ValueError):
    pass


def masked_log_softmax(scores: Tensor, masked: Tensor) -> Tensor:
    """Log-softmax over the unmasked entries; masked entries get ``-inf``.

    Masked logits are excluded from the normalizer rather than pushed down
    by a large constant, so their probability is exactly zero.
    """
    if bool(masked.all(-1).any()):
        raise AllMaskedError("every candidate is masked")
    safe = scores.masked_fill(masked, float("-inf"))
    top = safe.max(-1, keepdim=True).values.detach()
    shifted = torch.where(masked, torch.zeros_like(scores), scores - top)
    expd = torch.where(masked, torch.zeros_like(scores), torch.exp(shifted))
    logz = torch.log(expd.sum(-1, keepdim=True))
    return (shifted - logz).masked_fill(masked, float("-inf"))


def masked_softmax(scores: Tensor, masked: Tensor) -> Tensor:
    return masked_log_softmax(scores, masked).exp()


class MultiHeadAttention(nn.Module):
    """Single-query multi-head attention with output projection and residual."""

    def __init__(self, d: int, heads: int = 8):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.w_q = linear(d, d, bias=False)
        self.w_k = linear(d, d, bias=False)
        self.w_v = linear(d, d, bias=False)
        self.w_o = linear(d, d)

    def forward(self, query: Tensor, memory: Tensor) -> Tensor:
        B, N, d = memory.shape
        h, dk = self.heads, d // self.heads
        q = self.w_q(query).view(B, h, dk)
        k = self.w_k(memory).view(B, N, h, dk)
        v = self.w_v(memory).view(B, N, h, dk)
        att = torch.softmax(torch.einsum("bhk,bnhk->bhn", q, k) / math.sqrt(dk), dim=-1)
        out = torch.einsum("bhn,bnhk->bhk", att, v).reshape(B, d)
        return query + self.w_o(out)


def mean_pool_heads(
    heads: Sequence[nn.Module], parts: Sequence[Tensor], pool_dims: Sequence[tuple[int, ...]]
) -> Tensor:
    """Sum of mean-pooled linear heads, e.g. UE, AP and edge read-outs."""
    return sum(head(x).mean(dim=dims) for head, x, dims in zip(heads, parts, pool_dims))


def apply_typed(mlp_a: nn.Module, mlp_c: nn.Module, x: Tensor, typed: Tensor) -> Tensor:
    """Apply ``mlp_a`` to rows flagged in ``typed`` and ``mlp_c`` to the rest.

    Each MLP only sees its own rows, so batch statistics stay per type.
    """
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    flags = typed.reshape(-1)
    idx_a = torch.nonzero(flags, as_tuple=False).squeeze(1)
    idx_c = torch.nonzero(~flags, as_tuple=False).squeeze(1)
    parts, order = [], []
    if idx_a.numel():
        parts.append(mlp_a(flat[idx_a]))
        order.append(idx_a)
    if idx_c.numel():
        parts.append(mlp_c(flat[idx_c]))
        order.append(idx_c)
    y = torch.cat(parts)
    out = y.new_zeros(flat.shape[0], y.shape[-1]).index_copy(0, torch.cat(order), y)
    return out.view(*lead, y.shape[-1])


class TypedEdgeLayer(nn.Module):
    """Message passing on a UE x AP graph with two edge types (associated / candidate).

    Shapes: ``ue [B, K, d]``, ``ap [B, L, d]``, ``edge [B, K, L, d]``,
    ``typed [B, K, L]`` bool (True = associated).
    """

    def __init__(self, d: int, mlp: MlpFactory):
        super().__init__()
        self.upd_ue = mlp(2 * d)
        self.upd_ap = mlp(2 * d)
        self.edge_a, self.edge_c = mlp(3 * d), mlp(3 * d)
        self.to_ue_a, self.to_ue_c = mlp(2 * d), mlp(2 * d)
        self.to_ap_a, self.to_ap_c = mlp(2 * d), mlp(2 * d)

    def forward(self, ue: Tensor, ap: Tensor, edge: Tensor, typed: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        B, K, L, d = edge.shape
        ap_b = ap.unsqueeze(1).expand(B, K, L, d)
        ue_b = ue.unsqueeze(2).expand(B, K, L, d)
        g = apply_typed(self.to_ue_a, self.to_ue_c, torch.cat((ap_b, edge), -1), typed)
        n = apply_typed(self.to_ap_a, self.to_ap_c, torch.cat((ue_b, edge), -1), typed)
        ue_new = self.upd_ue(ue, g.mean(2))
        ap_new = self.upd_ap(ap, n.mean(1))
        x = torch.cat((edge, ue_new.unsqueeze(2).expand(B, K, L, d), ap_new.unsqueeze(1).expand(B, K, L, d)), -1)
        edge_new = apply_typed(self.edge_a, self.edge_c, x, typed)
        return ue_new, ap_new, edge_new


class TypedEdgeGnn(nn.Module):
    """Typed-edge GNN: type-specific edge initialization followed by ``n_layers`` updates."""

    def __init__(self, d_in: int, d: int, n_layers: int, mlp: MlpFactory):
        super().__init__()
        self.d = d
        self.init_a = mlp(d_in)
        self.init_c = mlp(d_in)
        self.layers = nn.ModuleList(TypedEdgeLayer(d, mlp) for _ in range(n_layers))

    def forward(self, x: Tensor, typed: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        B, K, L, _ = x.shape
        edge = apply_typed(self.init_a, self.init_c, x, typed)
        ue = edge.new_zeros(B, K, self.d)
        ap = edge.new_zeros(B, L, self.d)
        for layer in self.layers:
            ue, ap, edge = layer(ue, ap, edge, typed)
        return ue, ap, edge
