"""Model-based comparison methods and the exhaustive-search reference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .numerics import CDTYPE, NumericsError
from .problem import BudgetExceededError, DeadEndError, FeasibilityOracle, SupportSet, enumerate_feasible_supports
from .scenarios.cf import CfConfig, CfInstance
from .scenarios.ma import MaConfig, MaInstance, conflict_matrix


def supports_to_bits(supports: Sequence[SupportSet]) -> Tensor:
    return torch.as_tensor(np.stack([s.bits() for s in supports]), dtype=torch.bool)


def greedy_association(inst: CfInstance, cfg: CfConfig) -> list[SupportSet]:
    """Each UE in turn takes its ``L_max`` strongest APs that still have room."""
    gains = np.linalg.norm(inst.h, axis=-1)            # [B, K, L]
    out = []
    for g in gains:
        load = np.zeros(cfg.L, dtype=int)
        s = SupportSet(cfg.n_b)
        for k in range(cfg.K):
            taken = 0
            for l in np.argsort(-g[k], kind="stable"):
                if taken == cfg.l_max:
                    break
                if load[l] < cfg.k_max:
                    s.add(k * cfg.L + int(l))
                    load[l] += 1
                    taken += 1
        out.append(s)
    return out


def greedy_positioning(inst: MaInstance, cfg: MaConfig) -> list[SupportSet]:
    """``M`` picks by descending average channel gain, skipping CPs too close to a chosen one."""
    score = np.mean(np.abs(inst.h) ** 2, axis=1)        # [B, N]
    conflicts = conflict_matrix(inst.positions, cfg.d_min).numpy()
    out = []
    for sc, conf in zip(score, conflicts):
        blocked = np.zeros(cfg.N, dtype=bool)
        s = SupportSet(cfg.N)
        for t in range(cfg.M):
            cand = np.where(blocked, -np.inf, sc)
            if np.all(blocked):
                raise DeadEndError(f"no admissible CP at pick {t + 1}")
            n = int(np.argmax(cand))
            s.add(n)
            blocked |= conf[n]
            blocked[n] = True
        out.append(s)
    return out


def random_positioning(inst: MaInstance, cfg: MaConfig, rng: np.random.Generator, budget: int = 10**5) -> list[SupportSet]:
    """Uniform ``M``-subsets drawn until the spacing limit holds."""
    conflicts = conflict_matrix(inst.positions, cfg.d_min).numpy()
    out = []
    for conf in conflicts:
        for _ in range(budget):
            pick = rng.choice(cfg.N, size=cfg.M, replace=False)
            if not conf[np.ix_(pick, pick)].any():
                out.append(SupportSet(cfg.N, [int(i) for i in pick]))
                break
        else:
            raise BudgetExceededError(f"no feasible placement in {budget} draws")
    return out


@dataclass(frozen=True)
class WmmseConfig:
    max_iter: int = 50
    tol: float = 1e-6

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("need at least one iteration")


@dataclass
class WmmseResult:
    w: Tensor                 # [B, K, G, M]
    rate_history: Tensor      # [iterations + 1, B], entry 0 is the initial point

    @property
    def rate(self) -> Tensor:
        return self.rate_history[-1]


def _received(h: Tensor, w: Tensor) -> Tensor:
    """``a[b, j, k] = sum_g h_jg^H w_kg``."""
    return torch.einsum("bjgm,bkgm->bjk", h.conj(), w)


def _rates(h: Tensor, w: Tensor) -> Tensor:
    p = _received(h, w).abs() ** 2
    sig = torch.diagonal(p, dim1=1, dim2=2)
    return torch.log2(1.0 + sig / (p.sum(-1) - sig + 1.0)).sum(-1)


def _power_limited_solve(A: Tensor, b: Tensor, p_max: float, iters: int = 200) -> Tensor:
    """``w = (A + lam I)^-1 b`` with the smallest ``lam >= 0`` giving ``sum ||w_k||^2 <= p_max``.

    ``A [B, M, M]`` Hermitian PSD, ``b [B, M, K]``.
    """
    lam_eig, U = torch.linalg.eigh(A)
    lam_eig = lam_eig.clamp(min=0.0)
    c = (U.conj().transpose(-1, -2) @ b).abs().pow(2).sum(-1)          # [B, M]

    def power(lam):
        return (c / (lam_eig + lam.unsqueeze(-1)) ** 2).sum(-1)

    total = c.sum(-1)
    zero = torch.zeros_like(total)
    tiny = 1e-12 * lam_eig.max(-1).values.clamp(min=1e-300)
    # unconstrained solution is admissible when A is well conditioned on b's support
    ok0 = (lam_eig.min(-1).values > tiny) & (power(zero) <= p_max)
    hi = torch.sqrt(total / p_max) + 1e-300
    lo = zero.clone()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        over = power(mid) > p_max
        lo = torch.where(over, mid, lo)
        hi = torch.where(over, hi, mid)
    lam = torch.where(ok0, zero, hi)
    lam = torch.where(total > 0, lam, zero + 1.0)
    coeff = (U.conj().transpose(-1, -2) @ b) / (lam_eig + lam.unsqueeze(-1)).unsqueeze(-1)
    return U @ coeff


def wmmse_beamform(
    h: Tensor,
    p_max: float,
    noise: float,
    mask: Tensor | None = None,
    cfg: WmmseConfig = WmmseConfig(),
) -> WmmseResult:
    """Weighted-MMSE alternating optimization with one power budget per transmitter group.

    ``h [B, K, G, M]`` holds UE ``k``'s channel from group ``g`` (an AP in the
    cell-free case; a single group for one array). ``mask [B, K, G]`` marks
    which groups may serve which UE. Each group's beamformers are updated in
    turn with the others held fixed, which keeps the sum rate non-decreasing.
    """
    h = torch.as_tensor(h, dtype=CDTYPE) / np.sqrt(noise)
    B, K, G, M = h.shape
    m = torch.ones(B, K, G, dtype=torch.bool) if mask is None else torch.as_tensor(mask, dtype=torch.bool)
    mf = m.to(h.dtype).unsqueeze(-1)
    # matched-filter start: each group splits its budget evenly over its UEs
    load = m.sum(1, keepdim=True).clamp(min=1).unsqueeze(-1)
    norm = torch.linalg.vector_norm(h, dim=-1, keepdim=True)
    w = mf * torch.where(norm > 0, h / norm.clamp(min=1e-300), torch.zeros_like(h)) * torch.sqrt(p_max / load)
    history = [_rates(h, w)]
    for _ in range(cfg.max_iter):
        a = _received(h, w)                                           # [B, j, k]
        total = (a.abs() ** 2).sum(-1) + 1.0                          # [B, j]
        u = torch.diagonal(a, dim1=1, dim2=2) / total                 # [B, j]
        e = (1.0 - (torch.diagonal(a, dim1=1, dim2=2).abs() ** 2) / total).clamp(min=1e-300)
        alpha = 1.0 / e
        weight = alpha * u.abs() ** 2                                 # [B, j]
        for g in range(G):
            hg = h[:, :, g, :]                                        # [B, K, M]
            A = torch.einsum("bj,bjm,bjn->bmn", weight.to(h.dtype), hg, hg.conj())
            a = _received(h, w)
            own = torch.einsum("bjm,bkm->bjk", hg.conj(), w[:, :, g, :])
            other = a - own                                           # [B, j, k]
            rhs = (alpha * u).unsqueeze(-1) * hg                      # [B, k, M]
            rhs = rhs - torch.einsum("bj,bjm,bjk->bkm", weight.to(h.dtype), hg, other)
            rhs = rhs * m[:, :, g].to(h.dtype).unsqueeze(-1)
            w_g = _power_limited_solve(A, rhs.transpose(1, 2), p_max).transpose(1, 2)
            w = w.clone()
            w[:, :, g, :] = w_g * m[:, :, g].to(h.dtype).unsqueeze(-1)
        history.append(_rates(h, w))
        if bool(((history[-1] - history[-2]).abs() < cfg.tol).all()):
            break
    return WmmseResult(w, torch.stack(history))


def wmmse_cf(inst: CfInstance, bits: Tensor, cfg_sys: CfConfig, cfg: WmmseConfig = WmmseConfig()) -> WmmseResult:
    return wmmse_beamform(inst.channels(), cfg_sys.p_max, cfg_sys.noise, bits.view(-1, cfg_sys.K, cfg_sys.L), cfg)


def wmmse_ma(h_sel: Tensor, cfg_sys: MaConfig, cfg: WmmseConfig = WmmseConfig()) -> WmmseResult:
    """Single array with a total power budget; returns ``w`` as ``[B, K, 1, M]``."""
    return wmmse_beamform(torch.as_tensor(h_sel).unsqueeze(2), cfg_sys.p_max, cfg_sys.noise, None, cfg)


def zf_beamform(h: Tensor, p_max: float, rcond: float = 1e-10) -> Tensor:
    """Zero-forcing: ``h [B, K, M]`` (row k = h_k) -> ``w [B, K, M]`` with ``h_j^H w_k = 0`` for ``j != k``.

    Every UE gets power ``p_max / K``.
    """
    h = torch.as_tensor(h, dtype=CDTYPE)
    B, K, M = h.shape
    if M < K:
        raise NumericsError(f"zero-forcing needs at least as many antennas ({M}) as UEs ({K})")
    s = torch.linalg.svdvals(h)
    if bool((s[..., -1] <= rcond * s[..., 0]).any()):
        raise NumericsError("channel matrix is rank deficient")
    hc = h.conj()                                                     # rows h_j^H
    gram = hc @ hc.conj().transpose(-1, -2)                           # [B, K, K]
    w = hc.conj().transpose(-1, -2) @ torch.linalg.inv(gram)          # [B, M, K], columns w_k
    w = w / torch.linalg.vector_norm(w, dim=1, keepdim=True) * np.sqrt(p_max / K)
    return w.transpose(1, 2)


@dataclass
class BruteForceResult:
    support: SupportSet
    rate: float
    rates: np.ndarray             # one entry per enumerated support
    supports: list[SupportSet]


def brute_force_joint(
    inst: Any,
    oracle: FeasibilityOracle,
    solver: Callable[[Any, Tensor], Tensor],
    cardinalities: Sequence[int],
    budget: int = 10**4,
    supports: list[SupportSet] | None = None,
    enum_budget: int = 10**6,
) -> BruteForceResult:
    """Best (support, beamformer) pair over every feasible support of a single instance.

    ``solver(batch, bits)`` maps a batch of copies of the instance and their
    supports to sum rates. Ties go to the lexicographically first support.
    ``supports`` skips the enumeration; the candidates given are still
    checked against ``oracle``.
    """
    if supports is None:
        supports = []
        for t in cardinalities:
            supports.extend(enumerate_feasible_supports(oracle, inst, t, enum_budget))
    else:
        supports = [s for s in supports if oracle.is_feasible(s.bits(), inst, complete=True)]
    if not supports:
        raise BudgetExceededError("no feasible support")
    if len(supports) > budget:
        raise BudgetExceededError(f"{len(supports)} feasible supports exceed budget {budget}")
    supports = sorted(supports, key=lambda s: s.sorted())
    bits = supports_to_bits(supports)
    batch = inst[np.zeros(len(supports), dtype=int)]
    rates = np.asarray(solver(batch, bits).detach(), dtype=float)
    best = int(np.argmax(rates))
    return BruteForceResult(supports[best], float(rates[best]), rates, supports)
