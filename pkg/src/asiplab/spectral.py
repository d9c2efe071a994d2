"""Perturbed operator families t -> L_t coding characteristic functions.

For the doubling map, L_t acts on the Fourier modes e_k, |k| <= K, through
(L_t)_{k',k} = g_hat(2k' - k) where g = e^(i<t, f>); the coefficients are
computed by quadrature on a uniform grid of M = 8K points (alias-free for
band-limited observables).  At t = 0 this is the exact halving matrix
e_k -> e_{k/2} (even k) / 0 (odd k).  For finite Markov chains the family
is P_t = P diag(e^(i<t, f(s)>)) and products compose in reverse time
order.  The i.i.d. baseline is the 1x1 family [phi(t)].

Finite truncation stands in for the paper-style Banach space; for
observables that are not band-limited this is a heuristic, mitigated by
the truncation-stability checks in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .models import DoublingMap, FiniteMarkovChain, IidGaussian, gaussian_charfn, model_hash

__all__ = [
    "OperatorFamily",
    "SpectralData",
    "SpectralGapError",
    "build_operator",
    "operator_family",
    "coding_char_fn",
    "spectral_decompose",
    "check_conditions_I",
    "compute_u1",
    "operator_norm",
]

DEFAULT_EPS0 = 0.5
QUADRATURE_FACTOR = 8  # grid points per Fourier mode pair


class SpectralGapError(ValueError):
    """Raised when the top eigenvalue is degenerate or nearly so."""


def operator_norm(a: np.ndarray) -> float:
    """Spectral (2-)norm; the norm used for every operator bound here."""
    return float(np.linalg.norm(a, 2))


def _as_t(t, d: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.shape != (d,):
        raise ValueError(f"frequency must have shape ({d},), got {t.shape}")
    return t


def _doubling_matrix(model: DoublingMap, t: np.ndarray, K: int) -> np.ndarray:
    M = QUADRATURE_FACTOR * K
    y = np.arange(M) / M
    g = np.exp(1j * (model.observable(y) @ t))
    ghat = np.fft.fft(g) / M  # ghat[m] = m-th Fourier coefficient, indices mod M
    k = np.arange(-K, K + 1)
    lag = (2 * k[:, None] - k[None, :]) % M  # row k', column k
    return ghat[lag]


def build_operator(model, t, truncation: int | None = None) -> np.ndarray:
    """Matrix of L_t for the model, on the truncated basis.

    ``truncation`` is the Fourier cutoff K for the doubling map (ignored
    for chains, whose basis is the state space, and for the 1x1 i.i.d.
    family).
    """
    t = _as_t(t, model.d)
    if isinstance(model, DoublingMap):
        K = truncation if truncation is not None else max(32, 2 * model.observable.bandwidth)
        if K < 1:
            raise ValueError("truncation must be positive")
        if K < model.observable.bandwidth:
            raise ValueError(
                f"truncation K={K} below the observable bandwidth "
                f"{model.observable.bandwidth}"
            )
        return _doubling_matrix(model, t, K)
    if isinstance(model, FiniteMarkovChain):
        phases = np.exp(1j * (model.observable.values @ t))
        return model.P * phases[None, :]
    if isinstance(model, IidGaussian):
        return np.array([[gaussian_charfn(model.sigma2, t)]], dtype=complex)
    raise TypeError(f"unknown model type {type(model)!r}")


@dataclass
class OperatorFamily:
    """The coded family (basis, (L_t)_{|t|<=eps0}, u0, xi0).

    ``composition_order`` records how products realize the coding identity:
    "left" (dynamical) applies the latest frequency leftmost,
    L_{t_{n-1}} ... L_{t_0} u0; "right" (Markov) composes in reverse time
    order, xi0 P_{t_0} ... P_{t_{n-1}} u0.
    """

    builder: Callable[[np.ndarray], np.ndarray]
    dim: int
    d: int
    u0: np.ndarray
    xi0: np.ndarray
    eps0: float
    composition_order: str  # "left" | "right"
    basis: str
    model_hash: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.composition_order not in ("left", "right"):
            raise ValueError("composition_order must be 'left' or 'right'")
        pairing = complex(np.dot(self.xi0, self.u0))
        if abs(pairing - 1.0) > 1e-10:
            raise ValueError(f"<xi0, u0> = {pairing} is not 1 within 1e-10")

    def operator(self, t) -> np.ndarray:
        t = _as_t(t, self.d)
        if float(np.linalg.norm(t)) > self.eps0 + 1e-12:
            raise ValueError(f"|t| = {np.linalg.norm(t):.4g} exceeds eps0 = {self.eps0}")
        key = tuple(t)
        if key not in self._cache:
            if len(self._cache) > 256:
                self._cache.clear()
            m = self.builder(t)
            if not np.all(np.isfinite(m.view(float))):
                raise ValueError("operator matrix has non-finite entries")
            self._cache[key] = m
        return self._cache[key]

    @property
    def zero(self) -> np.ndarray:
        return self.operator(np.zeros(self.d))


def operator_family(model, truncation: int | None = None, eps0: float = DEFAULT_EPS0) -> OperatorFamily:
    """Coded operator family for a model.

    Doubling: basis e_{-K..K}, u0 = e_0, xi0 = Lebesgue integration
    (coefficient of e_0), left order.  Chain: basis = states, u0 = 1,
    xi0 = integration against mu, right order (exact coding for
    stationary mu; for mu != m it codes the time-shifted process).
    Iid: the exact 1x1 family.
    """
    if eps0 <= 0:
        raise ValueError("eps0 must be positive")
    if isinstance(model, DoublingMap):
        K = truncation if truncation is not None else max(32, 2 * model.observable.bandwidth)
        D = 2 * K + 1
        u0 = np.zeros(D, dtype=complex)
        u0[K] = 1.0
        xi0 = np.zeros(D, dtype=complex)
        xi0[K] = 1.0
        return OperatorFamily(
            builder=lambda t: build_operator(model, t, K),
            dim=D,
            d=model.d,
            u0=u0,
            xi0=xi0,
            eps0=eps0,
            composition_order="left",
            basis=f"fourier[-{K}..{K}]",
            model_hash=model_hash(model),
        )
    if isinstance(model, FiniteMarkovChain):
        S = model.n_states
        return OperatorFamily(
            builder=lambda t: build_operator(model, t),
            dim=S,
            d=model.d,
            u0=np.ones(S, dtype=complex),
            xi0=model.mu.astype(complex),
            eps0=eps0,
            composition_order="right",
            basis=f"states[{S}]",
            model_hash=model_hash(model),
        )
    if isinstance(model, IidGaussian):
        return OperatorFamily(
            builder=lambda t: build_operator(model, t),
            dim=1,
            d=model.d,
            u0=np.ones(1, dtype=complex),
            xi0=np.ones(1, dtype=complex),
            eps0=eps0,
            composition_order="left",
            basis="scalar",
            model_hash=model_hash(model),
        )
    raise TypeError(f"unknown model type {type(model)!r}")


def coding_char_fn(family: OperatorFamily, t_seq: Sequence) -> complex:
    """E e^(i sum_l <t_l, A_l>) through the coded operator product."""
    seq = [_as_t(t, family.d) for t in t_seq]
    if family.composition_order == "left":
        v = family.u0.copy()
        for t in seq:
            v = family.operator(t) @ v
    else:
        v = family.u0.copy()
        for t in reversed(seq):
            v = family.operator(t) @ v
    return complex(np.dot(family.xi0, v))


@dataclass(frozen=True)
class SpectralData:
    """Decomposition L0 = lam * proj + q with proj rank one.

    ``kappa`` is the modulus of the second-largest eigenvalue and ``c_q``
    a fitted constant with ||q^n|| <= c_q * kappa^n over the tested range
    (for nilpotent q, kappa = 0 and c_q = max_n ||q^n||).
    """

    lam: complex
    proj: np.ndarray
    q: np.ndarray
    kappa: float
    c_q: float
    nilpotent_index: int | None = None


def spectral_decompose(L0: np.ndarray, n_max: int = 100, gap_tol: float = 1e-6) -> SpectralData:
    """Split L0 into its top rank-one spectral part and the remainder.

    Raises SpectralGapError when the top eigenvalue is not simple with a
    relative gap of at least ``gap_tol``.
    """
    L0 = np.asarray(L0, dtype=complex)
    D = L0.shape[0]
    if D == 1:
        lam = complex(L0[0, 0])
        proj = np.ones((1, 1), dtype=complex)
        return SpectralData(lam, proj, L0 - lam * proj, 0.0, 1.0, nilpotent_index=1)
    w, vl, vr = scipy.linalg.eig(L0, left=True, right=True)
    idx = np.argsort(-np.abs(w))
    w, vl, vr = w[idx], vl[:, idx], vr[:, idx]
    gap = (np.abs(w[0]) - np.abs(w[1])) / max(np.abs(w[0]), 1e-300)
    if gap < gap_tol:
        raise SpectralGapError(
            f"top eigenvalue not simple: leading moduli {np.abs(w[0]):.12g}, "
            f"{np.abs(w[1]):.12g} (relative gap {gap:.3g} < {gap_tol:g})"
        )
    lam = complex(w[0])
    right = vr[:, 0]
    left = vl[:, 0].conj()  # row vector with left @ L0 = lam * left
    proj = np.outer(right, left) / (left @ right)
    q = L0 - lam * proj
    kappa = float(np.abs(w[1]))
    c_q = 1.0
    nilpotent_index = None
    power = np.eye(D, dtype=complex)
    for n in range(1, n_max + 1):
        power = power @ q
        norm = operator_norm(power)
        if norm < 1e-13:
            nilpotent_index = n
            break
        if kappa > 1e-13:
            c_q = max(c_q, norm / kappa**n)
        else:
            c_q = max(c_q, norm)
    if nilpotent_index is not None and kappa <= 1e-13:
        kappa = 0.0
    return SpectralData(lam, proj, q, kappa, c_q, nilpotent_index)


def compute_u1(sd: SpectralData, family: OperatorFamily) -> np.ndarray:
    """The vector u1 with proj(v) = <xi0, v> u1 and <xi0, u1> = 1.

    u1 = proj(u0) / <xi0, proj(u0)>; a vanishing pairing signals a
    miscoded family.
    """
    pu0 = sd.proj @ family.u0
    pairing = complex(np.dot(family.xi0, pu0))
    if abs(pairing) < 1e-12:
        raise ValueError("vanishing pairing <xi0, proj u0>: family is miscoded")
    return pu0 / pairing


@dataclass(frozen=True)
class ConditionReport:
    """Numerical check of conditions (I1) and (I2) over a frequency grid."""

    sup_norm: float
    c_q: float
    kappa: float
    passed: bool
    records: tuple[dict, ...]

    def __iter__(self):
        return iter(self.records)


def check_conditions_I(family: OperatorFamily, t_grid: Sequence, n_max: int = 100) -> ConditionReport:
    """sup_{t in grid, n <= n_max} ||L_t^n|| plus the (I1) decay fit.

    Failures are reported through the pass flag, never raised.
    """
    sd = spectral_decompose(family.zero, n_max=n_max)
    records = []
    sup_all = 0.0
    for t in t_grid:
        t = _as_t(t, family.d)
        L = family.operator(t)
        power = np.eye(family.dim, dtype=complex)
        sup_t = 0.0
        lam_t = None
        for _ in range(n_max):
            power = power @ L
            sup_t = max(sup_t, operator_norm(power))
        try:
            lam_t = complex(spectral_decompose(L, n_max=1).lam)
        except SpectralGapError:
            lam_t = None
        records.append(
            {
                "model": family.model_hash,
                "t": [float(v) for v in t],
                "lambda_re": None if lam_t is None else lam_t.real,
                "lambda_im": None if lam_t is None else lam_t.imag,
                "kappa": sd.kappa,
                "sup_norm": sup_t,
            }
        )
        sup_all = max(sup_all, sup_t)
    passed = bool(np.isfinite(sup_all) and sd.kappa < 1.0)
    return ConditionReport(sup_all, sd.c_q, sd.kappa, passed, tuple(records))
