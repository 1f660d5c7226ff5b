"""Movable-antenna downlink: pick ``M`` of ``N`` grid positions under a spacing limit.

Candidate positions form a ``side x side`` grid over a square region,
enumerated row-major from the bottom-left corner (index 0 is the phase
reference). Grid spacing is ``region / (side - 1)`` so the corners sit on
the region boundary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np
import torch
from torch import Tensor

from ..numerics import CDTYPE, DTYPE
from ..problem import Constraint, FeasibilityOracle, SupportSet
from .common import dbm_to_watt

# distances within this many metres of d_min count as equal to it
DISTANCE_TOL = 1e-12


@dataclass(frozen=True)
class MaConfig:
    side: int = 7
    M: int = 6
    K: int = 4
    wavelength: float = 0.06
    region: float | None = None
    d_min: float = 0.03
    p_max: float = dbm_to_watt(20.0)
    noise: float = dbm_to_watt(-100.0)
    n_paths: int = 16
    path_loss_db: float = 34.5
    alpha: float = 3.67
    dist_range: tuple[float, float] = (100.0, 200.0)

    def __post_init__(self):
        if self.side < 2:
            raise ValueError("grid side must be at least 2")
        if self.d_min <= 0:
            raise ValueError("d_min must be positive")
        if not 1 <= self.M <= self.N:
            raise ValueError("need 1 <= M <= N")
        if self.n_paths < 1 or self.K < 1:
            raise ValueError("need at least one path and one UE")
        if self.region is None:
            object.__setattr__(self, "region", 2.0 * self.wavelength)
        object.__setattr__(self, "dist_range", tuple(self.dist_range))

    @property
    def N(self) -> int:
        return self.side * self.side

    @property
    def n_b(self) -> int:
        return self.N

    @property
    def spacing(self) -> float:
        return self.region / (self.side - 1)

    def grid(self) -> np.ndarray:
        idx = np.arange(self.N)
        return np.stack((idx % self.side, idx // self.side), axis=-1) * self.spacing

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dist_range"] = list(self.dist_range)
        return d


@dataclass
class MaInstance:
    """A batch of movable-antenna realizations.

    ``h[b, k, n]`` is the channel between CP ``n`` and UE ``k``. The path
    parameters are kept when the batch was sampled (not when loaded from a
    dataset file).
    """

    h: np.ndarray                  # complex [B, K, N]
    positions: np.ndarray          # [B, N, 2] metres
    eta: np.ndarray | None = None  # complex [B, K, Lp]
    theta: np.ndarray | None = None
    phi: np.ndarray | None = None
    distance: np.ndarray | None = None  # [B, K]

    def __post_init__(self):
        if self.h.ndim != 3 or self.positions.ndim != 3:
            raise ValueError("h must be [B, K, N] and positions [B, N, 2]")
        if not np.isfinite(self.h).all():
            raise ValueError("non-finite channel entries")

    def __len__(self) -> int:
        return self.h.shape[0]

    def __getitem__(self, idx) -> "MaInstance":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1)
        opt = lambda a: None if a is None else a[idx]  # noqa: E731
        return MaInstance(
            self.h[idx], self.positions[idx], opt(self.eta), opt(self.theta), opt(self.phi), opt(self.distance)
        )

    @property
    def dims(self) -> tuple[int, int]:
        _, K, N = self.h.shape
        return K, N

    def channels(self, device=None) -> Tensor:
        return torch.as_tensor(self.h, dtype=CDTYPE, device=device)


def sample_aod(rng: np.random.Generator, size) -> tuple[np.ndarray, np.ndarray]:
    """Angles with joint density cos(theta) / (2 pi) on [-pi/2, pi/2]^2."""
    theta = np.arcsin(rng.uniform(-1.0, 1.0, size=size))
    phi = rng.uniform(-np.pi / 2, np.pi / 2, size=size)
    return theta, phi


def path_phases(positions: np.ndarray, theta: np.ndarray, phi: np.ndarray, wavelength: float) -> np.ndarray:
    """Phase of every path at every CP relative to CP 0: ``[B, K, N, Lp]``."""
    rel = positions - positions[:, :1, :]
    dx = rel[:, None, :, None, 0]
    dy = rel[:, None, :, None, 1]
    return 2 * np.pi / wavelength * (
        dx * (np.cos(theta) * np.sin(phi))[:, :, None, :] + dy * np.sin(theta)[:, :, None, :]
    )


def field_response_channel(eta: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return np.einsum("bkp,bknp->bkn", eta, np.exp(1j * rho))


def sample_ma_instance(cfg: MaConfig, rng: np.random.Generator, n: int = 1) -> MaInstance:
    K, Lp = cfg.K, cfg.n_paths
    dist = rng.uniform(*cfg.dist_range, size=(n, K))
    var = 10.0 ** (-cfg.path_loss_db / 10.0) * dist ** (-cfg.alpha)
    eta = np.sqrt(var / 2.0)[..., None] * (
        rng.standard_normal((n, K, Lp)) + 1j * rng.standard_normal((n, K, Lp))
    )
    theta, phi = sample_aod(rng, (n, K, Lp))
    positions = np.broadcast_to(cfg.grid(), (n, cfg.N, 2)).copy()
    h = field_response_channel(eta, path_phases(positions, theta, phi, cfg.wavelength))
    return MaInstance(h, positions, eta, theta, phi, dist)


def selected_channel(h: Tensor | np.ndarray, support: SupportSet | Tensor, M: int | None = None) -> Tensor:
    """Channels at the chosen CPs ordered by ascending CP index.

    ``support`` is a ``SupportSet`` (single instance, ``h [K, N]`` or
    ``[1, K, N]``) or a boolean ``[B, N]`` mask with the same count in every
    row. When ``M`` is given the selection size must equal it.
    """
    h = torch.as_tensor(h)
    if isinstance(support, SupportSet):
        if M is not None and len(support) != M:
            raise ValueError(f"support has {len(support)} CPs, expected {M}")
        idx = torch.as_tensor(support.sorted(), dtype=torch.long)
        return h[..., idx]
    mask = torch.as_tensor(support, dtype=torch.bool)
    counts = mask.sum(-1)
    if bool((counts != counts[0]).any()):
        raise ValueError("every row must select the same number of CPs")
    if M is not None and int(counts[0]) != M:
        raise ValueError(f"support has {int(counts[0])} CPs, expected {M}")
    B, K, _ = h.shape
    m = int(counts[0])
    idx = torch.nonzero(mask, as_tuple=False)[:, 1].view(B, m)
    return torch.gather(h, 2, idx.unsqueeze(1).expand(B, K, m))


def ma_sum_rate(h_sel: Tensor, w: Tensor, noise: float, per_user: bool = False) -> Tensor:
    """``h_sel [B, K, M]`` (row ``k`` is UE k's channel), ``w [B, K, M]`` (row ``k`` is w_k)."""
    a = torch.einsum("bjm,bkm->bjk", h_sel.conj(), w)
    power = a.real**2 + a.imag**2
    signal = torch.diagonal(power, dim1=1, dim2=2)
    interference = power.sum(-1) - signal
    rates = torch.log2(1.0 + signal / (interference + noise))
    return rates if per_user else rates.sum(-1)


def pair_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[..., :, None, :] - positions[..., None, :, :]
    return np.linalg.norm(diff, axis=-1)


def ma_constraint_oracle(cfg: MaConfig) -> FeasibilityOracle:
    """Cardinality and pairwise-spacing constraints.

    The cardinality equality is split in two: ``sum(b) <= M`` applies to
    partial supports, ``sum(b) >= M`` only to completed ones. Spacing uses
    the instance's CP coordinates when given, else the configured grid.
    """
    M, N = cfg.M, cfg.N
    grid = cfg.grid()

    def coords(inst):
        if inst is None:
            return grid
        pos = np.asarray(inst.positions)
        return pos[0] if pos.ndim == 3 else pos

    def spacing(i, j):
        def f(b, inst=None):
            p = coords(inst)
            d = float(np.linalg.norm(p[i] - p[j]))
            return b[i] * b[j] * cfg.d_min - d - DISTANCE_TOL

        return f

    constraints = [
        Constraint("count<=M", lambda b, _i=None: float(np.sum(b) - M)),
        Constraint("count>=M", lambda b, _i=None: float(M - np.sum(b)), terminal=True),
    ]
    constraints += [Constraint(f"spacing[{i},{j}]", spacing(i, j)) for i, j in combinations(range(N), 2)]
    return FeasibilityOracle(N, tuple(constraints), {"M": M, "d_min": cfg.d_min})


def conflict_matrix(positions: np.ndarray | Tensor, d_min: float) -> Tensor:
    """``[B, N, N]`` bool: CPs closer than ``d_min`` (diagonal excluded)."""
    pos = torch.as_tensor(np.asarray(positions), dtype=DTYPE)
    d = torch.linalg.vector_norm(pos.unsqueeze(-2) - pos.unsqueeze(-3), dim=-1)
    close = d < d_min - DISTANCE_TOL
    close &= ~torch.eye(pos.shape[-2], dtype=torch.bool)
    return close


def ma_blocked(chosen: Tensor, conflicts: Tensor, M: int) -> Tensor:
    """``[B, N]`` mask of CPs that are chosen, too close to a chosen CP, or beyond ``M``."""
    near = (conflicts & chosen.unsqueeze(1)).any(-1)
    full = (chosen.sum(-1) >= M).unsqueeze(-1)
    return chosen | near | full
