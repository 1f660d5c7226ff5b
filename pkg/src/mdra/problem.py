"""Support-set representation of binary decisions and feasibility oracles.

Indices are 0-based throughout the package: a support over ``n`` elements
holds indices in ``range(n)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class DeadEndError(RuntimeError):
    """Every remaining candidate is infeasible before the support is complete."""


class BudgetExceededError(RuntimeError):
    pass


@dataclass
class SupportSet:
    """Ordered selection of distinct indices, optionally closed by the end token."""

    n: int
    chosen: list[int] = field(default_factory=list)
    terminated: bool = False

    def __post_init__(self):
        self.chosen = [int(i) for i in self.chosen]
        if len(set(self.chosen)) != len(self.chosen):
            raise ValueError(f"duplicate indices in {self.chosen}")
        if any(not 0 <= i < self.n for i in self.chosen):
            raise ValueError(f"index out of range for universe of size {self.n}")

    def add(self, index: int) -> None:
        if self.terminated:
            raise ValueError("support already terminated")
        index = int(index)
        if index in self.chosen:
            raise ValueError(f"index {index} already chosen")
        if not 0 <= index < self.n:
            raise ValueError(f"index {index} out of range")
        self.chosen.append(index)

    def terminate(self) -> None:
        self.terminated = True

    def as_set(self) -> frozenset[int]:
        return frozenset(self.chosen)

    def sorted(self) -> list[int]:
        return sorted(self.chosen)

    def __len__(self) -> int:
        return len(self.chosen)

    def __contains__(self, index: object) -> bool:
        return index in self.chosen

    def bits(self) -> np.ndarray:
        return assignment_from_support(self)


def assignment_from_support(s: SupportSet) -> np.ndarray:
    b = np.zeros(s.n, dtype=np.int8)
    b[list(s.chosen)] = 1
    return b


def support_from_bits(bits: Sequence[int]) -> SupportSet:
    bits = np.asarray(bits)
    return SupportSet(len(bits), list(np.flatnonzero(bits)))


ConstraintFn = Callable[[np.ndarray, Any], float]


@dataclass(frozen=True)
class Constraint:
    """One evaluator ``f(bits, instance) <= 0``.

    ``terminal`` constraints (e.g. a cardinality lower bound) only apply to a
    completed support; they are ignored when masking partial supports.
    """

    name: str
    fn: ConstraintFn
    terminal: bool = False

    def __call__(self, bits: np.ndarray, inst: Any = None) -> float:
        return float(self.fn(bits, inst))


@dataclass(frozen=True)
class FeasibilityOracle:
    n: int
    constraints: tuple[Constraint, ...]
    params: dict = field(default_factory=dict)

    def values(self, bits: np.ndarray, inst: Any = None, include_terminal: bool = True) -> np.ndarray:
        return np.array(
            [c(bits, inst) for c in self.constraints if include_terminal or not c.terminal]
        )

    def violated(self, bits: np.ndarray, inst: Any = None, include_terminal: bool = True) -> list[str]:
        return [
            c.name
            for c in self.constraints
            if (include_terminal or not c.terminal) and c(bits, inst) > 0
        ]

    def is_feasible(self, bits: np.ndarray, inst: Any = None, complete: bool = True) -> bool:
        for c in self.constraints:
            if (complete or not c.terminal) and c(bits, inst) > 0:
                return False
        return True


@dataclass
class DecodingState:
    support: SupportSet
    step: int = 1

    @property
    def candidates(self) -> list[int]:
        taken = self.support.as_set()
        return [n for n in range(self.support.n) if n not in taken]


def infeasible_candidates(state: DecodingState, oracle: FeasibilityOracle, inst: Any = None) -> set[int]:
    """Candidates whose addition violates some non-terminal constraint.

    Reference implementation: re-evaluates every constraint on every
    single-index extension of the current support.
    """
    base = state.support.bits()
    out = set()
    for n in state.candidates:
        b = base.copy()
        b[n] = 1
        if not oracle.is_feasible(b, inst, complete=False):
            out.add(n)
    return out


def enumerate_feasible_supports(
    oracle: FeasibilityOracle, inst: Any, cardinality: int, budget: int = 10**6
) -> list[SupportSet]:
    """All size-``cardinality`` subsets satisfying every constraint, in lexicographic order."""
    if math.comb(oracle.n, cardinality) > budget:
        raise BudgetExceededError(
            f"C({oracle.n}, {cardinality}) = {math.comb(oracle.n, cardinality)} exceeds budget {budget}"
        )
    out = []
    for combo in itertools.combinations(range(oracle.n), cardinality):
        b = np.zeros(oracle.n, dtype=np.int8)
        b[list(combo)] = 1
        if oracle.is_feasible(b, inst, complete=True):
            out.append(SupportSet(oracle.n, list(combo)))
    return out


def enumerate_all_feasible_supports(
    oracle: FeasibilityOracle, inst: Any, max_cardinality: int | None = None, budget: int = 10**6
) -> list[SupportSet]:
    """Feasible supports of every cardinality up to ``max_cardinality``."""
    top = oracle.n if max_cardinality is None else max_cardinality
    total = sum(math.comb(oracle.n, t) for t in range(top + 1))
    if total > budget:
        raise BudgetExceededError(f"{total} subsets exceed budget {budget}")
    out = []
    for t in range(top + 1):
        out.extend(enumerate_feasible_supports(oracle, inst, t, budget))
    return out
