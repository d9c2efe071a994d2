"""Block-independence discrepancy: both sides of assumption (H).

Two groups of frequency blocks separated by a gap of k time steps yield a
joint characteristic function and a product of the two block characteristic
functions; both are evaluated exactly as operator products, so the
discrepancy is the coded expression with the L_0^k insertion for the gap.
The decay of the discrepancy in k is fitted against e^(-c k).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .spectral import OperatorFamily, SpectralGapError, spectral_decompose

__all__ = ["BlockConfig", "HReport", "h_discrepancy", "h_decay_fit", "EXACT_FLOOR"]

EXACT_FLOOR = 1e-14


@dataclass(frozen=True)
class BlockConfig:
    """n + m frequency blocks with a gap of k steps after block n.

    ``boundaries`` are the n+m+1 integers b_1 < ... < b_{n+m+1}; block j
    covers time steps [b_j, b_{j+1}) (the second group shifted by k) and
    carries frequency ``freqs[j-1]``.
    """

    boundaries: tuple[int, ...]
    split: int  # n = number of blocks in the first group
    gap: int
    freqs: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(
            self, "freqs", tuple(tuple(float(v) for v in np.atleast_1d(t)) for t in self.freqs)
        )
        if len(b) < 3:
            raise ValueError("need at least two blocks (three boundaries)")
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("boundaries must be strictly increasing")
        if b[0] < 0:
            raise ValueError("boundaries must be nonnegative")
        if not 1 <= self.split <= len(b) - 2:
            raise ValueError("split must leave both groups nonempty")
        if self.gap < 1:
            raise ValueError("gap must be at least 1")
        if len(self.freqs) != len(b) - 1:
            raise ValueError(f"need {len(b) - 1} frequencies, got {len(self.freqs)}")

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(y - x for x, y in zip(self.boundaries, self.boundaries[1:]))

    def as_record(self):
        return {
            "boundaries": list(self.boundaries),
            "split": self.split,
            "gap": self.gap,
            "freqs": [list(t) for t in self.freqs],
        }


def _pow(m: np.ndarray, k: int) -> np.ndarray:
    return np.linalg.matrix_power(m, k)


def _group_product(family: OperatorFamily, freqs, lengths) -> np.ndarray:
    """Product of L_{t_j}^{len_j} over one group, in composition order."""
    dim = family.dim
    out = np.eye(dim, dtype=complex)
    pairs = list(zip(freqs, lengths))
    if family.composition_order == "left":
        for t, ln in pairs:  # latest block leftmost
            out = _pow(family.operator(np.asarray(t)), ln) @ out
    else:
        for t, ln in pairs:  # reverse time order: earliest leftmost
            out = out @ _pow(family.operator(np.asarray(t)), ln)
    return out


def _char_value(family: OperatorFamily, *factors: np.ndarray) -> complex:
    """xi0 . (factors applied around u0), respecting composition order.

    ``factors`` are given earliest-first; for left order the product is
    reversed so the earliest factor acts on u0 first.
    """
    if family.composition_order == "left":
        v = family.u0
        for f in factors:
            v = f @ v
    else:
        v = family.u0
        for f in reversed(factors):
            v = f @ v
    return complex(np.dot(family.xi0, v))


def h_discrepancy(family: OperatorFamily, cfg: BlockConfig) -> float:
    """|joint - product| for the two block groups of ``cfg``, exactly.

    The joint side inserts L_0^gap between the groups; the product side
    evaluates each group's characteristic function on its own time axis.
    """
    b = cfg.boundaries
    n = cfg.split
    L0 = family.zero
    first = _group_product(family, cfg.freqs[:n], cfg.lengths[:n])
    second = _group_product(family, cfg.freqs[n:], cfg.lengths[n:])
    lead = _pow(L0, b[0])
    joint = _char_value(family, lead, first, _pow(L0, cfg.gap), second)
    prod1 = _char_value(family, lead, first)
    prod2 = _char_value(family, _pow(L0, b[n] + cfg.gap), second)
    return abs(joint - prod1 * prod2)


@dataclass(frozen=True)
class HReport:
    """Fit of the gap decay: discrepancy(k) ~ C e^(-c k)."""

    k_grid: tuple[int, ...]
    discrepancies: tuple[float, ...]
    c: float | None
    prefactor: float | None
    r_squared: float | None
    status: str  # "fit" | "exact_factorization"
    kappa: float
    passed: bool

    def as_record(self):
        return {
            "k_grid": list(self.k_grid),
            "discrepancy": list(self.discrepancies),
            "C": self.prefactor,
            "c": self.c,
            "r_squared": self.r_squared,
            "status": self.status,
            "kappa": self.kappa,
            "passed": self.passed,
        }


def h_decay_fit(family: OperatorFamily, cfg_template: BlockConfig, k_grid: Sequence[int]) -> HReport:
    """Fit log discrepancy against the gap size over ``k_grid``.

    Passes when the fitted rate c reaches 0.9 * (-log kappa).  When every
    discrepancy sits at the numerical floor the factorization is exact and
    the report says so instead of failing the fit.
    """
    k_grid = tuple(sorted(int(k) for k in k_grid))
    if len(k_grid) < 5:
        raise ValueError("k grid needs at least 5 points")
    disc = []
    for k in k_grid:
        cfg = BlockConfig(cfg_template.boundaries, cfg_template.split, k, cfg_template.freqs)
        disc.append(h_discrepancy(family, cfg))
    disc = np.array(disc)
    try:
        kappa = spectral_decompose(family.zero).kappa
    except SpectralGapError:
        kappa = float("nan")
    usable = disc > EXACT_FLOOR
    if disc[0] <= EXACT_FLOOR or usable.sum() < 2:
        return HReport(k_grid, tuple(disc), None, None, None, "exact_factorization", kappa, True)
    ks = np.asarray(k_grid, dtype=float)[usable]
    logs = np.log(disc[usable])
    slope, intercept = np.polyfit(ks, logs, 1)
    resid = logs - (slope * ks + intercept)
    ss_tot = float(((logs - logs.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    c = -float(slope)
    target = 0.9 * (-np.log(kappa)) if 0 < kappa < 1 else 0.0
    passed = bool(c >= target)
    return HReport(k_grid, tuple(disc), c, float(np.exp(intercept)), r2, "fit", kappa, passed)
