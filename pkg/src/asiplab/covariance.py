"""Autocovariances s_m, the limiting covariance Sigma^2, and the drift a.

Spectral mode computes s_m exactly for stationary models: via the m-th
transition-operator power for chains, and via the exact index-halving
action on Fourier coefficients for the doubling map (band-limited
observables make the lag sum finite).  The series
Sigma^2 = s_0 + sum_{m>=1} (s_m + s_m^T) is truncated adaptively with a
certified geometric tail bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import (
    DoublingMap,
    FiniteMarkovChain,
    IidGaussian,
    SamplePath,
    partial_sums,
    simulate_many,
)

__all__ = [
    "autocovariance",
    "autocovariance_series",
    "empirical_autocovariance",
    "fit_decay",
    "sigma2_series",
    "sigma2_spectral",
    "sigma2_empirical",
    "estimate_centering",
    "check_cov_growth",
    "Sigma2Result",
    "CenteringResult",
]

_FLOOR = 1e-14


def _require_stationary(model):
    if isinstance(model, FiniteMarkovChain) and not model.is_stationary():
        raise ValueError("spectral mode needs a stationary chain (mu = m)")


def stationary_mean(model) -> np.ndarray:
    if isinstance(model, DoublingMap):
        return model.observable.mean()
    if isinstance(model, FiniteMarkovChain):
        return model.m @ model.observable.values
    if isinstance(model, IidGaussian):
        return np.zeros(model.d)
    raise TypeError(f"unknown model type {type(model)!r}")


def _chain_autocov(model: FiniteMarkovChain, m: int) -> np.ndarray:
    F = model.observable.values  # (S, d)
    a = model.m @ F
    PmF = F.copy()
    for _ in range(m):
        PmF = model.P @ PmF
    s = (model.m[:, None] * F).T @ PmF - np.outer(a, a)
    return s


def _doubling_autocov(model: DoublingMap, m: int) -> np.ndarray:
    # apply the exact operator power e_k -> e_{k/2^m} to each component,
    # then pair against f; only indices divisible by 2^m survive.
    obs = model.observable
    d = obs.d
    a = obs.mean()
    s = np.zeros((d, d), dtype=complex)
    for k, c in obs.coeffs.items():
        ck = obs.coefficient(-(2**m) * k)
        s += np.outer(ck, c)
    s -= np.outer(a, a)
    return np.real(s)


def autocovariance(model, m: int, mode: str = "spectral", path: SamplePath | np.ndarray | None = None):
    """Lag-m autocovariance matrix s_m = cov(A_0, A_m).

    Spectral mode is exact for stationary models; empirical mode returns
    (estimate, standard_error) from a sample path.
    """
    if m < 0:
        raise ValueError("lag must be nonnegative")
    if mode == "spectral":
        _require_stationary(model)
        if isinstance(model, FiniteMarkovChain):
            return _chain_autocov(model, m)
        if isinstance(model, DoublingMap):
            return _doubling_autocov(model, m)
        if isinstance(model, IidGaussian):
            return model.sigma2.copy() if m == 0 else np.zeros((model.d, model.d))
        raise TypeError(f"unknown model type {type(model)!r}")
    if mode == "empirical":
        if path is None:
            raise ValueError("empirical mode needs a sample path")
        return empirical_autocovariance(path, m)
    raise ValueError(f"unknown mode {mode!r}")


def empirical_autocovariance(path, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Centered, bias-uncorrected (divide by n) lag-m estimator plus SE."""
    values = path.values if isinstance(path, SamplePath) else np.asarray(path, dtype=float)
    values = np.atleast_2d(values.T).T
    n = values.shape[0]
    if m >= n:
        raise ValueError(f"lag {m} >= path length {n}")
    x = values - values.mean(axis=0)
    prods = x[: n - m, :, None] * x[m:, None, :]  # (n-m, d, d)
    est = prods.sum(axis=0) / n
    se = prods.std(axis=0) / math.sqrt(n - m)
    return est, se


def autocovariance_series(model, max_lag: int) -> np.ndarray:
    """Stacked exact s_0 .. s_max_lag, shape (max_lag+1, d, d)."""
    return np.stack([autocovariance(model, m) for m in range(max_lag + 1)])


def fit_decay(norms: np.ndarray, lags: np.ndarray | None = None, floor: float = _FLOOR) -> tuple[float, float]:
    """Least-squares fit |s_m| ~ C e^(-delta m); returns (C, delta).

    ``lags`` defaults to 0..len(norms)-1.  Lags at or below ``floor`` are
    excluded; with fewer than two usable points the series is treated as
    finitely supported (delta = inf).
    """
    norms = np.asarray(norms, dtype=float)
    m = np.arange(len(norms)) if lags is None else np.asarray(lags)
    keep = norms > floor
    if keep.sum() < 2:
        return (float(norms.max(initial=0.0)), math.inf)
    slope, intercept = np.polyfit(m[keep], np.log(norms[keep]), 1)
    return float(math.exp(intercept)), float(-slope)


@dataclass(frozen=True)
class Sigma2Result:
    sigma2: np.ndarray
    tail_bound: float
    delta: float
    c: float
    lags_used: int
    s_norms: np.ndarray

    def as_record(self):
        return {
            "Sigma2": self.sigma2.tolist(),
            "tail_bound": self.tail_bound,
            "delta": None if math.isinf(self.delta) else self.delta,
            "lags_used": self.lags_used,
        }


def sigma2_series(s: np.ndarray, tail_tol: float = 1e-10) -> Sigma2Result:
    """Sum the series s_0 + sum (s_m + s_m^T) with a certified tail bound.

    ``s`` stacks s_0..s_M.  The truncation lag is the smallest M whose
    fitted geometric tail C e^(-delta(M+1))/(1-e^(-delta)) drops below
    ``tail_tol``; if the trailing norms sit at the numerical floor the
    tail is exactly zero (finitely supported series).
    """
    s = np.asarray(s, dtype=float)
    norms = np.array([np.linalg.norm(sm, 2) for sm in s])
    if len(norms) > 1:
        c, delta = fit_decay(norms[1:], lags=np.arange(1, len(norms)))
    else:
        c, delta = 0.0, math.inf
    if delta <= 0:
        raise ValueError(f"autocovariance decay fit failed: delta = {delta:.4g} <= 0")
    nz = np.nonzero(norms > _FLOOR)[0]
    if math.isinf(delta):
        m_used = int(nz.max()) if len(nz) else 0
        tail = 0.0
    else:
        m_used = len(norms) - 1
        for m in range(1, len(norms)):
            tail_m = 2 * c * math.exp(-delta * m) / (1.0 - math.exp(-delta))
            if tail_m < tail_tol:
                m_used = m - 1
                break
        tail = 2 * c * math.exp(-delta * (m_used + 1)) / (1.0 - math.exp(-delta))
    sigma2 = s[0].copy()
    for m in range(1, m_used + 1):
        sigma2 += s[m] + s[m].T
    sigma2 = (sigma2 + sigma2.T) / 2.0
    evals = np.linalg.eigvalsh(sigma2)
    if evals.min() < -1e-10 - tail:
        raise ValueError(f"Sigma^2 not PSD: min eigenvalue {evals.min():.3e}")
    return Sigma2Result(sigma2, tail, delta, c, m_used, norms)


def sigma2_spectral(model, max_lag: int = 200, tail_tol: float = 1e-10) -> Sigma2Result:
    """Exact-series limiting covariance for a stationary model."""
    if isinstance(model, IidGaussian):
        s = np.stack([model.sigma2, np.zeros_like(model.sigma2)])
    elif isinstance(model, DoublingMap):
        # lags beyond the bandwidth are exactly zero
        cut = max(1, model.observable.bandwidth).bit_length() + 1
        s = autocovariance_series(model, min(max_lag, cut))
    else:
        s = autocovariance_series(model, max_lag)
    return sigma2_series(s, tail_tol=tail_tol)


def sigma2_empirical(model, n: int, replicas: int, seed: int, a: np.ndarray | None = None):
    """Monte Carlo cov(S_n)/n over replicas; returns (estimate, entry SEs)."""
    if a is None:
        a = stationary_mean(model)
    values = simulate_many(model, n, seed, replicas)
    z = (values.sum(axis=1) - n * np.asarray(a)) / math.sqrt(n)  # (R, d)
    z = z - z.mean(axis=0)
    est = z.T @ z / (replicas - 1)
    d = est.shape[0]
    se = np.sqrt(
        (np.outer(np.diag(est), np.diag(est)) + est**2) / (replicas - 1)
    ).reshape(d, d)
    return est, se


@dataclass(frozen=True)
class CenteringResult:
    a: np.ndarray
    delta: float
    deviations: np.ndarray
    stationary: bool


def estimate_centering(model, max_ell: int = 50) -> CenteringResult:
    """Drift a = lim E(A_l) and the fitted relaxation rate delta.

    Expectations are exact via operator powers; a stationary start gives
    zero deviations and delta = inf.
    """
    a = stationary_mean(model)
    if isinstance(model, FiniteMarkovChain):
        F = model.observable.values
        dist = model.mu.copy()
        devs = []
        for _ in range(max_ell + 1):
            devs.append(np.linalg.norm(dist @ F - a))
            dist = dist @ model.P
        devs = np.array(devs)
    else:
        # doubling (Lebesgue start) and iid are exactly stationary
        devs = np.zeros(max_ell + 1)
    _, delta = fit_decay(devs)
    return CenteringResult(a, delta, devs, bool(devs.max(initial=0.0) <= 1e-12))


@dataclass(frozen=True)
class CovGrowthReport:
    deviations: np.ndarray
    n_values: np.ndarray
    sup: float
    bounded: bool
    mode: str


def check_cov_growth(model, sigma2: np.ndarray, n_values, mode: str = "spectral") -> CovGrowthReport:
    """sup_n |cov(S_n) - n Sigma^2| over the given window lengths.

    Spectral mode evaluates cov(S_n) = n s_0 + sum_{k<n} (n-k)(s_k+s_k^T)
    exactly for stationary models (the start m of the window then drops
    out).  Bounded means the deviations show no trend: the maximum over
    the top quartile of n stays within 5% of the overall maximum.
    """
    n_values = np.asarray(sorted(int(v) for v in n_values))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=float))
    if mode != "spectral":
        raise ValueError("only the exact spectral mode is implemented")
    _require_stationary(model)
    if isinstance(model, DoublingMap):
        max_lag = max(1, model.observable.bandwidth).bit_length() + 1
    elif isinstance(model, IidGaussian):
        max_lag = 1
    else:
        sd = np.abs(np.linalg.eigvals(model.P))
        kappa = float(np.sort(sd)[-2]) if model.n_states > 1 else 0.0
        max_lag = 64 if kappa < 1e-12 else min(4096, int(math.ceil(-36 / math.log(max(kappa, 1e-12)))))
    s = autocovariance_series(model, max_lag)
    sym = np.stack([s[0]] + [s[k] + s[k].T for k in range(1, len(s))])
    devs = []
    for n in n_values:
        ks = np.arange(1, min(n, max_lag + 1))
        cov = n * sym[0] + ((n - ks)[:, None, None] * sym[ks]).sum(axis=0)
        devs.append(np.linalg.norm(cov - n * sigma2, 2))
    devs = np.array(devs)
    cut = max(1, int(round(len(devs) * 0.75)))
    bounded = bool(devs[cut:].max(initial=0.0) <= devs.max() * 1.05 + 1e-12)
    return CovGrowthReport(devs, n_values, float(devs.max()), bounded, mode)
