"""Constructive coupling toolbox on finite supports and gaussians.

Covers: the compact-spectrum smoothing variable V, the Prokhorov smoothing
upper bound and exact small-support Prokhorov distances, maximal (total
variation) couplings, Rosenthal-type moment terms, the block grouping that
feeds a Zaitsev-style strong approximation, and variance-matching joint
gaussian couplings built through a common inflated intermediate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

__all__ = [
    "DiscreteDistribution",
    "CouplingPlan",
    "maximal_coupling",
    "total_variation",
    "prokhorov_exact_small",
    "prokhorov_upper_bound",
    "smoothing_isometry_constant",
    "SmoothingSpec",
    "build_smoothing_V",
    "rosenthal_terms",
    "ZaitsevGrouping",
    "zaitsev_block_grouping",
    "VarianceMatchingCoupling",
    "variance_matching_coupling",
]

PROKHOROV_MAX_SUPPORT = 12  # 2^12 subsets is the brute-force oracle budget


# ---------------------------------------------------------------------------
# discrete distributions and maximal couplings


class DiscreteDistribution:
    """Finite-support distribution on R^d; masses may be exact rationals."""

    def __init__(self, support, masses):
        support = np.atleast_2d(np.asarray(support, dtype=float).T).T
        masses = list(masses)
        if support.shape[0] != len(masses):
            raise ValueError("support and masses lengths differ")
        if len(masses) == 0:
            raise ValueError("empty support")
        if any(m < 0 for m in masses):
            raise ValueError("negative mass")
        if abs(float(sum(masses)) - 1.0) > 1e-12:
            raise ValueError(f"masses sum to {float(sum(masses))!r}, not 1")
        if len({tuple(p) for p in support}) != support.shape[0]:
            raise ValueError("support points must be distinct")
        self.support = support
        self.masses = masses
        self.exact = all(isinstance(m, Rational) for m in masses)

    @property
    def size(self) -> int:
        return len(self.masses)

    @property
    def d(self) -> int:
        return self.support.shape[1]

    def masses_float(self) -> np.ndarray:
        return np.array([float(m) for m in self.masses])


def total_variation(f_masses: Sequence, g_masses: Sequence):
    """TV distance of two mass vectors on a common support: sum|F-G|/2.

    Exact when the inputs are exact (Fraction/int)."""
    if len(f_masses) != len(g_masses):
        raise ValueError("mass vectors must have equal length")
    diffs = [abs(a - b) for a, b in zip(f_masses, g_masses)]
    tv = sum(diffs)
    return tv / 2 if isinstance(tv, Rational) else tv / 2.0


@dataclass
class CouplingPlan:
    """Joint mass matrix realizing a coupling of two finite distributions."""

    joint: np.ndarray  # object dtype when exact
    row_masses: list
    col_masses: list
    exact: bool

    @property
    def mismatch_probability(self):
        """P(X != Y): total off-diagonal mass (square plans only)."""
        n = self.joint.shape[0]
        if self.joint.shape[1] != n:
            raise ValueError("mismatch probability needs a square (common-support) plan")
        diag = sum(self.joint[i, i] for i in range(n))
        one = Fraction(1) if self.exact else 1.0
        return one - diag

    def as_float(self) -> np.ndarray:
        return np.array([[float(v) for v in row] for row in self.joint])

    def check_marginals(self, atol: float = 1e-12) -> bool:
        rows = [sum(row) for row in self.joint]
        cols = [sum(self.joint[:, j]) for j in range(self.joint.shape[1])]
        return all(
            abs(float(r - m)) <= atol for r, m in zip(rows, self.row_masses)
        ) and all(abs(float(c - m)) <= atol for c, m in zip(cols, self.col_masses))


def maximal_coupling(f: DiscreteDistribution, g: DiscreteDistribution) -> CouplingPlan:
    """Maximal coupling on a common support: P(X != Y) equals TV(F, G).

    Diagonal mass min(F_i, G_i); the excess is spread as the product of the
    normalized residuals.  All arithmetic stays exact for rational masses.
    """
    if f.size != g.size or not np.array_equal(f.support, g.support):
        raise ValueError("maximal coupling needs a common support")
    n = f.size
    exact = f.exact and g.exact
    zero = Fraction(0) if exact else 0.0
    fm, gm = list(f.masses), list(g.masses)
    diag = [min(a, b) for a, b in zip(fm, gm)]
    rest_f = [a - d for a, d in zip(fm, diag)]
    rest_g = [b - d for b, d in zip(gm, diag)]
    r = sum(rest_f)
    joint = [[zero] * n for _ in range(n)]
    for i in range(n):
        joint[i][i] = diag[i]
    if r > 0:
        for i in range(n):
            if rest_f[i] == 0:
                continue
            for j in range(n):
                if rest_g[j] == 0:
                    continue
                joint[i][j] = joint[i][j] + rest_f[i] * rest_g[j] / r
    dtype = object if exact else float
    return CouplingPlan(np.array(joint, dtype=dtype), fm, gm, exact)


# ---------------------------------------------------------------------------
# Prokhorov distance: exact brute force and the smoothing upper bound


def _one_sided_feasible(eps: float, masses: np.ndarray, dmin: np.ndarray, other: np.ndarray) -> bool:
    # feasibility of P(B) <= eps + Q(B^eps) over every subset B
    reach = (dmin < eps) @ other
    return bool(np.all(masses <= eps + reach + 1e-15))


def _subset_tables(f: DiscreteDistribution, g: DiscreteDistribution):
    nf = f.size
    dist = np.linalg.norm(f.support[:, None, :] - g.support[None, :, :], axis=2)
    dmin = np.full((2**nf, g.size), np.inf)
    fmass = np.zeros(2**nf)
    fv = f.masses_float()
    for mask in range(1, 2**nf):
        low = mask & -mask
        i = low.bit_length() - 1
        rest = mask ^ low
        dmin[mask] = np.minimum(dmin[rest], dist[i])
        fmass[mask] = fmass[rest] + fv[i]
    return fmass, dmin


def prokhorov_exact_small(f: DiscreteDistribution, g: DiscreteDistribution, tol: float = 1e-13) -> float:
    """Exact Prokhorov distance by subset enumeration and bisection.

    The feasibility predicate P(B) <= eps + Q(B^eps) is checked for every
    subset of either support (both directions, so the result is exactly
    symmetric); combined support size is capped at 12 points.
    """
    if f.size + g.size > PROKHOROV_MAX_SUPPORT:
        raise ValueError(
            f"combined support {f.size + g.size} exceeds the brute-force cap "
            f"{PROKHOROV_MAX_SUPPORT}"
        )
    if f.d != g.d:
        raise ValueError("dimension mismatch")
    fmass, fdmin = _subset_tables(f, g)
    gmass, gdmin = _subset_tables(g, f)
    gv, fv = g.masses_float(), f.masses_float()

    def feasible(eps: float) -> bool:
        return _one_sided_feasible(eps, fmass, fdmin, gv) and _one_sided_feasible(
            eps, gmass, gdmin, fv
        )

    lo, hi = 0.0, 1.0
    if not feasible(hi):
        hi = 1.0 + 1e-9
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def smoothing_isometry_constant(d: int) -> float:
    """C(d) = sqrt(vol(unit d-ball)) / (2 pi)^(d/2).

    The constant of the L^2 smoothing bound: ||1_{|x|<=T'}||_2 per block is
    (vol(B_d) T'^d)^(1/2) and Plancherel costs (2 pi)^(-d/2) per block.
    """
    vol = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    return math.sqrt(vol) / (2 * math.pi) ** (d / 2)


def prokhorov_upper_bound(
    phi: np.ndarray,
    gamma: np.ndarray,
    spacing,
    t_prime: float,
    d: int,
    n_blocks: int,
    tails: Sequence[float],
) -> float:
    """Smoothing bound: sum of tails + (C(d) T'^(d/2))^N ||phi - gamma||_2.

    ``phi`` and ``gamma`` are characteristic functions tabulated on a
    common grid covering their support; ``spacing`` is the grid step per
    axis (scalar or one per axis) for the L^2 quadrature.
    """
    phi = np.asarray(phi, dtype=complex)
    gamma = np.asarray(gamma, dtype=complex)
    if phi.shape != gamma.shape:
        raise ValueError("phi and gamma grids differ")
    if len(tails) != n_blocks:
        raise ValueError(f"need {n_blocks} tail terms, got {len(tails)}")
    if t_prime <= 0:
        raise ValueError("T' must be positive")
    steps = np.atleast_1d(np.asarray(spacing, dtype=float))
    if steps.size == 1:
        steps = np.full(phi.ndim, steps[0])
    if steps.size != phi.ndim:
        raise ValueError("one grid spacing per axis required")
    volume_element = float(np.prod(steps))
    l2 = math.sqrt(float((np.abs(phi - gamma) ** 2).sum()) * volume_element)
    factor = (smoothing_isometry_constant(d) * t_prime ** (d / 2)) ** n_blocks
    return float(sum(tails) + factor * l2)


# ---------------------------------------------------------------------------
# the smoothing variable V


class SmoothingSpec:
    """Smoothing variable V = W - W' whose spectrum dies beyond eps0.

    W has density h ∝ sinc^10(eps0 x / 10): the inverse transform of a
    piecewise-polynomial bump supported in [-eps0/2, eps0/2], squared.  The
    characteristic function of V is h_hat(t)^2, supported exactly in
    {|t| <= eps0}; moments of W are finite through order 8.
    """

    def __init__(self, eps0: float, grid_points: int = 2**15 + 1, half_width: float | None = None):
        if eps0 <= 0:
            raise ValueError("eps0 must be positive")
        if grid_points < 1024:
            raise ValueError("grid too coarse: need at least 1024 points")
        self.eps0 = float(eps0)
        self._a = self.eps0 / 10.0
        L = half_width if half_width is not None else 60.0 / self._a
        self.x = np.linspace(-L, L, grid_points)
        z = np.sinc(self._a * self.x / np.pi) ** 10
        norm = trapezoid(z, self.x)
        self.h = z / norm
        self.char_support_radius = self.eps0
        cdf = np.concatenate([[0.0], np.cumsum((self.h[1:] + self.h[:-1]) * np.diff(self.x) / 2)])
        self._cdf = cdf / cdf[-1]
        leak = abs(self.char_v(1.05 * self.eps0))
        if leak > 1e-8:
            raise ValueError(
                f"grid too coarse: characteristic-function leakage {leak:.3e} at 1.05*eps0"
            )

    def char_w(self, t: float) -> float:
        """E e^(itW) by quadrature (real: h is even)."""
        return float(trapezoid(self.h * np.cos(t * self.x), self.x))

    def char_v(self, t: float) -> float:
        """E e^(itV) = char_w(t)^2 >= 0."""
        return self.char_w(t) ** 2

    def sample_w(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.interp(rng.random(size), self._cdf, self.x)

    def sample_v(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.sample_w(rng, size) - self.sample_w(rng, size)

    def w_moment(self, order: int) -> float:
        return float(trapezoid(self.h * self.x**order, self.x))

    def v_moments(self, max_order: int = 6) -> dict[int, float]:
        """Moments of V = W - W' via the binomial expansion (independence)."""
        w = [self.w_moment(j) for j in range(max_order + 1)]
        out = {}
        for m in range(1, max_order + 1):
            total = 0.0
            for j in range(m + 1):
                total += math.comb(m, j) * w[j] * (-1) ** (m - j) * w[m - j]
            out[m] = total
        return out


def build_smoothing_V(eps0: float, grid_points: int = 2**15 + 1, half_width: float | None = None) -> SmoothingSpec:
    """Construct the smoothing variable; raises if the grid leaks spectrum."""
    return SmoothingSpec(eps0, grid_points=grid_points, half_width=half_width)


# ---------------------------------------------------------------------------
# Rosenthal terms and Zaitsev-style block grouping


def rosenthal_terms(second_moments, p_moments, p: float) -> tuple[float, float]:
    """The two bracket terms (sum E X_j^2)^(1/2) and (sum E|X_j|^p)^(1/p).

    The multiplicative constant C(p) is the caller's knob; these are the
    raw terms ("up to the unspecified constant").
    """
    if p <= 2:
        raise ValueError("p must exceed 2")
    second = np.asarray(second_moments, dtype=float)
    pth = np.asarray(p_moments, dtype=float)
    if np.any(second < 0) or np.any(pth < 0):
        raise ValueError("moments must be nonnegative")
    return float(np.sqrt(second.sum())), float(pth.sum() ** (1.0 / p))


@dataclass(frozen=True)
class ZaitsevGrouping:
    """Consecutive block grouping 0 = m_0 < ... < m_s = b with eigen bounds."""

    boundaries: tuple[int, ...]
    lambda_mins: tuple[float, ...]
    lambda_maxs: tuple[float, ...]
    m_bound: float
    c_upper: float
    individual_bound_ok: bool

    @property
    def n_blocks(self) -> int:
        return len(self.boundaries) - 1


def zaitsev_block_grouping(covariances: Sequence[np.ndarray], m_bound: float) -> ZaitsevGrouping:
    """Greedy grouping with 100 M^2 |v|^2 <= <B_k v, v> on every block.

    Blocks close as soon as their accumulated smallest eigenvalue reaches
    100 M^2; a trailing remainder is absorbed into the last block.  The
    upper constant C with <B_k v, v> <= 100 C M^2 |v|^2 is reported, as is
    whether each individual covariance obeys the M^2 bound (reported, not
    enforced).
    """
    covs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in covariances]
    if not covs:
        raise ValueError("no covariances given")
    target = 100.0 * m_bound**2
    individual_ok = all(np.linalg.eigvalsh(c).max() <= m_bound**2 * (1 + 1e-9) for c in covs)
    boundaries = [0]
    acc = np.zeros_like(covs[0])
    for i, c in enumerate(covs):
        acc = acc + c
        if np.linalg.eigvalsh(acc).min() >= target:
            boundaries.append(i + 1)
            acc = np.zeros_like(covs[0])
    if len(boundaries) == 1:
        total_min = np.linalg.eigvalsh(sum(covs)).min()
        raise ValueError(
            f"infeasible grouping: total smallest-eigenvalue mass {total_min:.6g} "
            f"< 100 M^2 = {target:.6g}"
        )
    if boundaries[-1] != len(covs):
        boundaries[-1] = len(covs)  # absorb the remainder into the last block
    lam_min, lam_max = [], []
    for lo, hi in zip(boundaries, boundaries[1:]):
        block = sum(covs[lo:hi])
        ev = np.linalg.eigvalsh(block)
        lam_min.append(float(ev.min()))
        lam_max.append(float(ev.max()))
    return ZaitsevGrouping(
        tuple(boundaries),
        tuple(lam_min),
        tuple(lam_max),
        float(m_bound),
        max(lam_max) / target,
        individual_ok,
    )


# ---------------------------------------------------------------------------
# variance-matching gaussian coupling


def _psd_factor(c: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(c)
    if evals.min() < -1e-10 * max(1.0, abs(evals.max())):
        raise ValueError(f"matrix not PSD: min eigenvalue {evals.min():.3e}")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


@dataclass
class VarianceMatchingCoupling:
    """Joint gaussian law of (S, Z) built through E = S + W = Z + noise.

    S ~ N(0, cov_s); W ~ N(0, M) independent with M = cov_z + delta I -
    cov_s; E = S + W; Z is the conditional draw Z = cov_z (cov_z +
    delta I)^-1 E + residual with the Schur-complement covariance.  Both
    marginals are exact and D = S - Z is centered with closed-form second
    moment.
    """

    cov_s: np.ndarray
    cov_z: np.ndarray
    delta: float
    m_matrix: np.ndarray
    cross: np.ndarray  # cov(S, Z)
    mean_square_diff: float
    _a: np.ndarray
    _fac_s: np.ndarray
    _fac_m: np.ndarray
    _fac_schur: np.ndarray

    @property
    def joint_cov(self) -> np.ndarray:
        top = np.hstack([self.cov_s, self.cross])
        bot = np.hstack([self.cross.T, self.cov_z])
        return np.vstack([top, bot])

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        d = self.cov_s.shape[0]
        s = rng.standard_normal((size, d)) @ self._fac_s.T
        return s, self.transport(s, rng)

    def transport(self, s_samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Pathwise map: draws of S (size, d) to the coupled Z draws."""
        s_samples = np.atleast_2d(np.asarray(s_samples, dtype=float).T).T
        w = rng.standard_normal(s_samples.shape) @ self._fac_m.T
        resid = rng.standard_normal(s_samples.shape) @ self._fac_schur.T
        return (s_samples + w) @ self._a.T + resid


def variance_matching_coupling(cov_s, cov_z, delta: float | None = None) -> VarianceMatchingCoupling:
    """Couple N(0, cov_s) with N(0, cov_z) through an inflated intermediate.

    ``delta`` defaults to the smallest inflation making
    M = cov_z + delta I - cov_s positive semidefinite, plus 1e-9.
    """
    cov_s = np.atleast_2d(np.asarray(cov_s, dtype=float))
    cov_z = np.atleast_2d(np.asarray(cov_z, dtype=float))
    if cov_s.shape != cov_z.shape or cov_s.shape[0] != cov_s.shape[1]:
        raise ValueError("covariances must be square matrices of equal size")
    d = cov_s.shape[0]
    if delta is None:
        delta = max(0.0, float(np.linalg.eigvalsh(cov_s - cov_z).max())) + 1e-9
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    m = cov_z + delta * np.eye(d) - cov_s
    if np.linalg.eigvalsh(m).min() < -1e-10:
        raise ValueError(
            f"M = cov_z + delta I - cov_s is not PSD (min eigenvalue "
            f"{np.linalg.eigvalsh(m).min():.3e}); increase delta"
        )
    cov_e = cov_z + delta * np.eye(d)
    evals = np.linalg.eigvalsh(cov_e)
    if evals.min() <= 1e-12 * max(1.0, evals.max()):
        raise ValueError("cov_z + delta I is singular")
    inv_e = np.linalg.inv(cov_e)
    a = cov_z @ inv_e
    schur = cov_z - cov_z @ inv_e @ cov_z
    schur = (schur + schur.T) / 2.0
    cross = cov_s @ inv_e @ cov_z
    msd = float(np.trace(cov_s) + np.trace(cov_z) - 2.0 * np.trace(cross))
    return VarianceMatchingCoupling(
        cov_s=cov_s,
        cov_z=cov_z,
        delta=float(delta),
        m_matrix=m,
        cross=cross,
        mean_square_diff=msd,
        _a=a,
        _fac_s=_psd_factor(cov_s),
        _fac_m=_psd_factor(m),
        _fac_schur=_psd_factor(schur),
    )
