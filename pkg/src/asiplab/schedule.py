"""Triadic Cantor-like block schedule of the dyadic levels [2^n, 2^{n+1}).

Each level is split into F = 2^f equal intervals (f = floor(beta*n))
separated by gaps whose lengths double with rank: the gap J_{n,j} in front
of interval I_{n,j} has length 2^floor(eps*n) * 2^r where r is the index of
the lowest set bit of j (and r = f for j = 0).  All lengths are exact
integers; levels where the closed-form interval length is not a positive
integer fall back to a single gap-free interval and are flagged invalid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

__all__ = [
    "SchedulerParams",
    "Block",
    "LevelSchedule",
    "decompose_level",
    "schedule_levels",
    "gap_mass",
    "gap_positions",
    "gap_mass_bound_constant",
    "optimal_beta",
    "block_sums",
    "representative_levels",
    "parse_rational",
]

_MAX_LEVEL = 40  # lengths stay well inside 64-bit integers


def parse_rational(text) -> Fraction:
    """Parse '2/3', '0.4' or a number into an exact Fraction."""
    if isinstance(text, Fraction):
        return text
    if isinstance(text, (int, float)):
        return Fraction(text).limit_denominator(10**12)
    return Fraction(str(text).strip())


@dataclass(frozen=True)
class SchedulerParams:
    """Block-schedule parameters: beta in (0,1), eps in (0, 1-beta).

    ``p`` is the integrability exponent used only by the optimal-beta
    helper; it is carried along for reporting.
    """

    beta: Fraction
    eps: Fraction
    p: float = math.inf

    def __post_init__(self):
        beta = parse_rational(self.beta)
        eps = parse_rational(self.eps)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "eps", eps)
        if not 0 < beta < 1:
            raise ValueError(f"beta must lie in (0,1), got {beta}")
        if not 0 < eps < 1 - beta:
            raise ValueError(f"eps must lie in (0, 1-beta) = (0, {1 - beta}), got {eps}")
        if self.p <= 2:
            raise ValueError(f"integrability exponent p must exceed 2, got {self.p}")

    def f(self, n: int) -> int:
        return math.floor(self.beta * n)

    def e(self, n: int) -> int:
        return math.floor(self.eps * n)


@dataclass(frozen=True)
class Block:
    """One interval or gap of a level decomposition.

    ``rank`` is set for gaps only: the gap length is 2^floor(eps*n) * 2^rank.
    """

    kind: str  # "interval" | "gap"
    level: int
    index: int
    start: int
    length: int
    rank: int | None = None

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class LevelSchedule:
    n: int
    valid: bool
    blocks: tuple[Block, ...]
    reason: str | None = None

    @property
    def intervals(self) -> tuple[Block, ...]:
        return tuple(b for b in self.blocks if b.kind == "interval")

    @property
    def gaps(self) -> tuple[Block, ...]:
        return tuple(b for b in self.blocks if b.kind == "gap")

    def total_length(self) -> int:
        return sum(b.length for b in self.blocks)


def _gap_rank(j: int, f: int) -> int:
    if j == 0:
        return f
    return (j & -j).bit_length() - 1


def _gap_total(n: int, f: int, e: int) -> int:
    # 2^e * 2^(f-1) * (f+2); always an even product before the halving.
    return (2**e * (f + 2) * 2**f) // 2


def level_validity(n: int, params: SchedulerParams) -> tuple[bool, str | None]:
    """Whether the closed-form decomposition of level n exists.

    Requires the interval length 2^(n-f) - (f+2)*2^(e-1) to be a positive
    integer (integrality can fail when floor(eps*n) = 0 and f+2 is odd).
    """
    if n < 0:
        raise ValueError("level must be nonnegative")
    if n > _MAX_LEVEL:
        raise ValueError(f"level {n} exceeds the supported maximum {_MAX_LEVEL}")
    f, e = params.f(n), params.e(n)
    gap_total = _gap_total(n, f, e)
    interval_total = 2**n - gap_total
    F = 2**f
    if interval_total < F:
        return False, (
            f"interval length would be < 1: 2^{n} - {gap_total} = {interval_total} < F = {F}"
        )
    if interval_total % F != 0:
        return False, (
            f"interval length not an integer: (2^{n} - {gap_total}) / {F} "
            f"= {interval_total / F}"
        )
    return True, None


def decompose_level(n: int, params: SchedulerParams) -> LevelSchedule:
    """Decompose [2^n, 2^{n+1}) into alternating gaps and intervals.

    Invalid levels (too small for the (beta, eps) closed forms) come back
    as a single flagged interval with no gaps.
    """
    valid, reason = level_validity(n, params)
    start = 2**n
    if not valid:
        block = Block("interval", n, 0, start, 2**n)
        return LevelSchedule(n, False, (block,), reason)
    f, e = params.f(n), params.e(n)
    F = 2**f
    ilen = (2**n - _gap_total(n, f, e)) // F
    blocks = []
    pos = start
    for j in range(F):
        r = _gap_rank(j, f)
        glen = 2**e * 2**r
        blocks.append(Block("gap", n, j, pos, glen, rank=r))
        pos += glen
        blocks.append(Block("interval", n, j, pos, ilen))
        pos += ilen
    if pos != 2 ** (n + 1):
        raise AssertionError(f"level {n} does not tile: ended at {pos} != 2^{n + 1}")
    return LevelSchedule(n, True, tuple(blocks), None)


def schedule_levels(n_lo: int, n_hi: int, params: SchedulerParams) -> list[LevelSchedule]:
    return [decompose_level(n, params) for n in range(n_lo, n_hi + 1)]


def representative_levels(n_max: int, params: SchedulerParams, n_min: int = 1) -> list[int]:
    """Valid levels n with floor(beta*(n+1)) > floor(beta*n).

    These are the last levels for each block count F = 2^f, where block
    geometry is comparable from one representative to the next; the trend
    tests in the validator evaluate at these by default.
    """
    out = []
    for n in range(n_min, n_max + 1):
        if params.f(n + 1) > params.f(n) and level_validity(n, params)[0]:
            out.append(n)
    return out


def gap_mass(k: int, params: SchedulerParams) -> int:
    """Exact count of gap positions in [0, k] (endpoints included).

    Invalid levels contribute nothing (single-interval convention); the
    last, partially covered level is counted block by block.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0:
        return 0
    total = 0
    for n in range(0, k.bit_length()):
        if 2**n > k:
            break
        valid, _ = level_validity(n, params)
        if not valid:
            continue
        f, e = params.f(n), params.e(n)
        if 2 ** (n + 1) - 1 <= k:
            total += _gap_total(n, f, e)
            continue
        for b in decompose_level(n, params).gaps:
            if b.start > k:
                break
            total += min(b.length, k - b.start + 1)
    return total


def gap_positions(limit: int, params: SchedulerParams) -> np.ndarray:
    """Sorted array of gap positions < limit."""
    chunks = []
    for n in range(0, max(1, limit).bit_length()):
        if 2**n >= limit:
            break
        sched = decompose_level(n, params)
        for b in sched.gaps:
            if b.start >= limit:
                break
            chunks.append(np.arange(b.start, min(b.end, limit), dtype=np.int64))
    if not chunks:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(chunks)


def gap_mass_bound_constant(params: SchedulerParams, ks: Sequence[int]) -> tuple[float, float]:
    """Exponent and constant for the |J ∩ [0,k]| <= C k^(beta + 3 eps/2) bound.

    Returns (exponent, C) with C the maximum observed ratio over ``ks``.
    """
    expo = float(params.beta + Fraction(3, 2) * params.eps)
    c = 0.0
    for k in ks:
        if k <= 0:
            continue
        c = max(c, gap_mass(k, params) / k**expo)
    return expo, c


def optimal_beta(p) -> tuple[Fraction, Fraction]:
    """Optimal block exponent beta = p/(2p-2) and error exponent p/(4p-4).

    Exact rational arithmetic; p = inf gives (1/2, 1/4).  At the returned
    beta the two error exponents beta/2 and (1-beta)/2 + beta/p coincide.
    """
    if p == math.inf:
        return Fraction(1, 2), Fraction(1, 4)
    p = Fraction(p) if not isinstance(p, Fraction) else p
    if p <= 2:
        raise ValueError(f"p must exceed 2, got {p}")
    return p / (2 * p - 2), p / (4 * p - 4)


def block_sums(values: np.ndarray, blocks: Sequence[Block]) -> np.ndarray:
    """Sums of path values over the interval blocks, via prefix differences.

    ``values`` has shape (n, d) or (n,) and must cover every referenced
    index; returns one row per interval block, in the given order.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float).T).T  # (n, d)
    intervals = [b for b in blocks if b.kind == "interval"]
    if intervals and max(b.end for b in intervals) > values.shape[0]:
        raise ValueError(
            f"path of length {values.shape[0]} too short for blocks ending at "
            f"{max(b.end for b in intervals)}"
        )
    prefix = np.concatenate([np.zeros((1, values.shape[1])), np.add.accumulate(values, axis=0)])
    out = np.stack([prefix[b.end] - prefix[b.start] for b in intervals])
    return out
