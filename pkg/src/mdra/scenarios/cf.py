"""Cell-free downlink: UE-AP association under fronthaul load limits.

Pair ``(k, l)`` (UE ``k``, AP ``l``, both 0-based) maps to flat index
``k * L + l``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor

from ..numerics import CDTYPE
from ..problem import Constraint, FeasibilityOracle
from .common import dbm_to_watt


@dataclass(frozen=True)
class CfConfig:
    L: int = 8
    K: int = 20
    M: int = 4
    k_max: int = 6
    l_max: int = 2
    p_max: float = dbm_to_watt(10.0)
    noise: float = dbm_to_watt(-100.0)
    area: float = 500.0
    shadow_std_db: float = 2.0
    min_distance: float = 1.0

    def __post_init__(self):
        if min(self.L, self.K, self.M) < 1:
            raise ValueError("L, K, M must be positive")
        if not (1 <= self.k_max <= self.K and 1 <= self.l_max <= self.L):
            raise ValueError("need 1 <= K_max <= K and 1 <= L_max <= L")
        if self.p_max <= 0 or self.noise <= 0:
            raise ValueError("powers must be positive")

    @property
    def n_b(self) -> int:
        return self.K * self.L

    @property
    def max_support(self) -> int:
        return min(self.K * self.l_max, self.L * self.k_max)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CfInstance:
    """A batch of cell-free realizations (leading axis ``B``).

    ``h[b, k, l]`` is the length-``M`` channel between UE ``k`` and AP ``l``.
    """

    h: np.ndarray         # complex [B, K, L, M]
    ap_pos: np.ndarray    # [B, L, 2]
    ue_pos: np.ndarray    # [B, K, 2]

    def __post_init__(self):
        if self.h.ndim != 4:
            raise ValueError("h must have shape [B, K, L, M]")
        if not np.isfinite(self.h).all():
            raise ValueError("non-finite channel entries")

    def __len__(self) -> int:
        return self.h.shape[0]

    def __getitem__(self, idx) -> "CfInstance":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1)
        return CfInstance(self.h[idx], self.ap_pos[idx], self.ue_pos[idx])

    @property
    def dims(self) -> tuple[int, int, int]:
        _, K, L, M = self.h.shape
        return K, L, M

    def channels(self, device=None) -> Tensor:
        return torch.as_tensor(self.h, dtype=CDTYPE, device=device)


def path_loss_db(distance: np.ndarray, shadow_db: np.ndarray | float = 0.0) -> np.ndarray:
    return 30.5 + 36.7 * np.log10(distance) + shadow_db


def sample_cf_instance(cfg: CfConfig, rng: np.random.Generator, n: int = 1) -> CfInstance:
    ap = rng.uniform(0.0, cfg.area, size=(n, cfg.L, 2))
    ue = rng.uniform(0.0, cfg.area, size=(n, cfg.K, 2))
    dist = np.linalg.norm(ue[:, :, None, :] - ap[:, None, :, :], axis=-1)
    dist = np.maximum(dist, cfg.min_distance)
    shadow = rng.normal(0.0, cfg.shadow_std_db, size=dist.shape)
    gain = 10.0 ** (-path_loss_db(dist, shadow) / 10.0)
    g = (rng.standard_normal((n, cfg.K, cfg.L, cfg.M)) + 1j * rng.standard_normal((n, cfg.K, cfg.L, cfg.M)))
    h = np.sqrt(gain)[..., None] * g / np.sqrt(2.0)
    return CfInstance(h, ap, ue)


def cf_sum_rate(h: Tensor, bits: Tensor, w: Tensor, noise: float, per_user: bool = False) -> Tensor:
    """Sum rate in bit/s/Hz for a batch.

    ``h, w``: complex ``[B, K, L, M]``; ``bits``: ``[B, K, L]`` (0/1).
    Entry ``a[b, j, k] = sum_l b_kl h_jl^H w_kl`` is what UE ``j`` receives
    of UE ``k``'s stream.
    """
    wb = w * bits.to(w.real.dtype).unsqueeze(-1)
    a = torch.einsum("bjlm,bklm->bjk", h.conj(), wb)
    power = a.real**2 + a.imag**2
    signal = torch.diagonal(power, dim1=1, dim2=2)
    interference = power.sum(-1) - signal
    rates = torch.log2(1.0 + signal / (interference + noise))
    return rates if per_user else rates.sum(-1)


def ap_loads(bits: np.ndarray) -> np.ndarray:
    return np.asarray(bits).sum(axis=-2)


def ue_loads(bits: np.ndarray) -> np.ndarray:
    return np.asarray(bits).sum(axis=-1)


def cf_constraint_oracle(cfg: CfConfig) -> FeasibilityOracle:
    K, L = cfg.K, cfg.L

    def ap_limit(l):
        return lambda b, _inst=None: float(np.reshape(b, (K, L))[:, l].sum() - cfg.k_max)

    def ue_limit(k):
        return lambda b, _inst=None: float(np.reshape(b, (K, L))[k, :].sum() - cfg.l_max)

    constraints = tuple(Constraint(f"ap_load[{l}]", ap_limit(l)) for l in range(L)) + tuple(
        Constraint(f"ue_load[{k}]", ue_limit(k)) for k in range(K)
    )
    return FeasibilityOracle(K * L, constraints, {"k_max": cfg.k_max, "l_max": cfg.l_max})


def cf_blocked(chosen: Tensor, cfg: CfConfig) -> Tensor:
    """Flat ``[B, K*L]`` mask of pairs that are chosen or would break a load limit."""
    B = chosen.shape[0]
    c = chosen.view(B, cfg.K, cfg.L)
    ap_full = c.sum(1) >= cfg.k_max
    ue_full = c.sum(2) >= cfg.l_max
    return (c | ap_full[:, None, :] | ue_full[:, :, None]).view(B, -1)


def cf_features(h: Tensor, scale: float) -> Tensor:
    """Real edge features ``[B, K, L, 2M]``: (re, im) stacked, divided by the channel RMS."""
    hs = h / scale
    return torch.cat((hs.real, hs.imag), dim=-1)


def channel_rms(h: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.abs(h) ** 2)))
