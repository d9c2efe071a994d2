"""Generative models for R^d-valued processes (A_0, A_1, ...).

Three model kinds are supported: the angle-doubling circle map with a
band-limited observable, finite-state Markov chains with a value-table
observable, and an i.i.d. gaussian baseline.  Every simulation is exactly
reproducible from its seed; replicas draw from disjoint streams obtained
by ``numpy.random.SeedSequence(seed).spawn`` (the documented splitting).

Doubling-map orbits never iterate ``2*x mod 1`` in floating point (which
collapses after ~53 steps).  A random bit stream of length n+64 is drawn
up front and x_k is read as the 53-bit dyadic rational formed by bits
k+1 .. k+53, so the shift identity holds exactly on the integer windows.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

__all__ = [
    "FourierObservable",
    "TableObservable",
    "DoublingMap",
    "FiniteMarkovChain",
    "IidGaussian",
    "SamplePath",
    "simulate",
    "simulate_many",
    "iter_path_chunks",
    "partial_sums",
    "stationary_distribution",
    "coboundary_observable",
    "doubling_bits",
    "doubling_windows",
    "doubling_orbit",
]

ORBIT_BITS = 53  # dyadic window width; W/2^53 is an exact float64
_EXTRA_BITS = 64  # bits generated beyond the path length


class FourierObservable:
    """Band-limited observable on the circle, f(x) = sum_k c_k e^(2 pi i k x).

    Coefficients are given per Fourier index as complex vectors of length d
    and must be conjugate-symmetric (c_{-k} = conj(c_k)) so values are real.
    """

    def __init__(self, coeffs: dict[int, np.ndarray | complex | float]):
        if not coeffs:
            raise ValueError("empty Fourier table")
        table = {}
        d = None
        for k, c in coeffs.items():
            c = np.atleast_1d(np.asarray(c, dtype=complex))
            if d is None:
                d = c.shape[0]
            elif c.shape[0] != d:
                raise ValueError("inconsistent coefficient dimensions")
            table[int(k)] = c
        for k, c in table.items():
            cc = table.get(-k)
            if cc is None or not np.allclose(cc, np.conj(c), atol=1e-12):
                raise ValueError(f"Fourier table not conjugate-symmetric at k={k}")
        if not np.all(np.isfinite(np.concatenate(list(table.values())))):
            raise ValueError("non-finite Fourier coefficients")
        self.coeffs = dict(sorted(table.items()))
        self.d = d

    @property
    def bandwidth(self) -> int:
        return max(abs(k) for k in self.coeffs)

    def coefficient(self, k: int) -> np.ndarray:
        return self.coeffs.get(int(k), np.zeros(self.d, dtype=complex))

    def mean(self) -> np.ndarray:
        return self.coefficient(0).real.copy()

    def sup_bound(self) -> float:
        """Upper bound for sup |f| (triangle inequality on the table)."""
        return float(sum(np.linalg.norm(c) for c in self.coeffs.values()))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (self.d,))
        out += self.coefficient(0).real
        for k, c in self.coeffs.items():
            if k <= 0:
                continue
            phase = 2.0 * np.pi * k * x
            out += 2.0 * (np.cos(phase)[..., None] * c.real - np.sin(phase)[..., None] * c.imag)
        return out

    def descriptor(self):
        return {
            "type": "fourier",
            "d": self.d,
            "coeffs": {str(k): [[v.real, v.imag] for v in c] for k, c in self.coeffs.items()},
        }


class TableObservable:
    """Observable on a finite state space, one R^d value per state."""

    def __init__(self, values: np.ndarray):
        values = np.atleast_2d(np.asarray(values, dtype=float).T).T
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite observable values")
        self.values = values
        self.n_states, self.d = values.shape

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return self.values[np.asarray(states, dtype=np.intp)]

    def descriptor(self):
        return {"type": "table", "d": self.d, "values": self.values.tolist()}


def coboundary_observable(g: FourierObservable) -> FourierObservable:
    """Build f = g - g∘T for the doubling map, exactly on coefficients."""
    coeffs: dict[int, np.ndarray] = {}
    for k, c in g.coeffs.items():
        coeffs[k] = coeffs.get(k, np.zeros(g.d, dtype=complex)) + c
        coeffs[2 * k] = coeffs.get(2 * k, np.zeros(g.d, dtype=complex)) - c
    coeffs = {k: c for k, c in coeffs.items() if np.any(np.abs(c) > 0)}
    if not coeffs:
        coeffs = {0: np.zeros(g.d, dtype=complex)}
    return FourierObservable(coeffs)


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Stationary row vector of a row-stochastic matrix (m P = m, sum 1)."""
    P = np.asarray(P, dtype=float)
    w, v = np.linalg.eig(P.T)
    i = int(np.argmin(np.abs(w - 1.0)))
    if abs(w[i] - 1.0) > 1e-8:
        raise ValueError("no eigenvalue 1: matrix is not stochastic")
    m = np.real(v[:, i])
    m = m / m.sum()
    if np.any(m < -1e-12):
        raise ValueError("stationary vector has negative entries")
    return np.clip(m, 0.0, None) / np.clip(m, 0.0, None).sum()


@dataclass(frozen=True)
class DoublingMap:
    """T(x) = 2x mod 1 on the circle with Lebesgue initial measure."""

    observable: FourierObservable
    kind: str = field(default="doubling", init=False)

    @property
    def d(self) -> int:
        return self.observable.d

    def descriptor(self):
        return {"kind": self.kind, "d": self.d, "observable": self.observable.descriptor()}


class FiniteMarkovChain:
    """Finite Markov chain with initial measure mu and stationary measure m.

    The observation at step k is f(X_k) with X_0 ~ mu.  Rows of P must sum
    to 1 within 1e-12; mu defaults to the stationary distribution.
    """

    kind = "markov"

    def __init__(self, P: np.ndarray, observable: TableObservable, mu: np.ndarray | None = None):
        P = np.asarray(P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("P is not row-stochastic (rows must sum to 1 within 1e-12)")
        if observable.n_states != P.shape[0]:
            raise ValueError("observable table does not match the number of states")
        self.P = P
        self.observable = observable
        self.m = stationary_distribution(P)
        if np.linalg.norm(self.m @ P - self.m, ord=np.inf) > 1e-10:
            raise ValueError("stationary distribution check m P = m failed")
        if mu is None:
            self.mu = self.m.copy()
        else:
            mu = np.asarray(mu, dtype=float)
            if mu.shape != (P.shape[0],) or np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
                raise ValueError("mu must be a probability vector over the states")
            self.mu = mu
        self._cum = np.cumsum(P, axis=1)

    @property
    def d(self) -> int:
        return self.observable.d

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    def is_stationary(self, tol: float = 1e-10) -> bool:
        return bool(np.linalg.norm(self.mu - self.m, ord=np.inf) <= tol)

    def descriptor(self):
        return {
            "kind": self.kind,
            "d": self.d,
            "P": self.P.tolist(),
            "mu": self.mu.tolist(),
            "observable": self.observable.descriptor(),
        }


class IidGaussian:
    """Independent N(0, Sigma2) draws; the exactly-factorizing baseline."""

    kind = "iid"

    def __init__(self, sigma2: np.ndarray):
        sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=float))
        if sigma2.shape[0] != sigma2.shape[1]:
            raise ValueError("Sigma2 must be square")
        if np.linalg.norm(sigma2 - sigma2.T) > 1e-12:
            raise ValueError("Sigma2 must be symmetric")
        evals, evecs = np.linalg.eigh(sigma2)
        if evals.min() < -1e-10:
            raise ValueError(f"Sigma2 not PSD: min eigenvalue {evals.min():.3e}")
        self.sigma2 = sigma2
        self._factor = evecs * np.sqrt(np.clip(evals, 0.0, None))

    @property
    def d(self) -> int:
        return self.sigma2.shape[0]

    def descriptor(self):
        return {"kind": self.kind, "d": self.d, "sigma2": self.sigma2.tolist()}


ProcessModel = DoublingMap | FiniteMarkovChain | IidGaussian


def model_hash(model) -> str:
    blob = json.dumps(model.descriptor(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SamplePath:
    """A realization (A_0, ..., A_{n-1}) plus its reproducibility stamp."""

    values: np.ndarray  # (n, d)
    seed: int
    model_hash: str

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# doubling-map bit machinery


def doubling_bits(seed_or_rng, n: int) -> np.ndarray:
    """n + 64 uniform random bits as a uint8 array."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    return rng.integers(0, 2, size=n + _EXTRA_BITS, dtype=np.uint8)


def doubling_windows(bits: np.ndarray, n: int) -> np.ndarray:
    """Exact 53-bit windows W_k = bits[k .. k+52] as integers (uint64).

    Satisfies W_{k+1} = ((W_k << 1) & (2^53 - 1)) | bits[k+53] exactly,
    which is the digit-shift form of x_{k+1} = 2 x_k mod 1.
    """
    bits = np.asarray(bits)
    if bits.shape[-1] < n + ORBIT_BITS:
        raise ValueError("bit stream too short for the requested orbit")
    batch = bits.ndim == 2
    b = bits if batch else bits[None, :]
    mask = np.uint64((1 << ORBIT_BITS) - 1)
    w = np.zeros(b.shape[0], dtype=np.uint64)
    for j in range(ORBIT_BITS):
        w = (w << np.uint64(1)) | b[:, j].astype(np.uint64)
    out = np.empty((b.shape[0], n), dtype=np.uint64)
    out[:, 0] = w
    one = np.uint64(1)
    for k in range(1, n):
        w = ((w << one) & mask) | b[:, k + ORBIT_BITS - 1].astype(np.uint64)
        out[:, k] = w
    return out if batch else out[0]


def doubling_orbit(bits: np.ndarray, n: int) -> np.ndarray:
    """Orbit points x_k = W_k / 2^53 in [0, 1), exact float64 dyadics."""
    return doubling_windows(bits, n).astype(np.float64) * 2.0**-ORBIT_BITS


# ---------------------------------------------------------------------------
# simulation


def _child_rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def _simulate_batch(model, n: int, rngs) -> np.ndarray:
    """Paths for one generator per replica; returns (len(rngs), n, d)."""
    r = len(rngs)
    if isinstance(model, DoublingMap):
        bits = np.stack([doubling_bits(g, n) for g in rngs])
        x = doubling_orbit(bits, n)
        return model.observable(x)
    if isinstance(model, FiniteMarkovChain):
        u_init = np.array([g.random() for g in rngs])
        u = np.stack([g.random(n - 1) for g in rngs]) if n > 1 else np.empty((r, 0))
        states = np.empty((r, n), dtype=np.intp)
        cum_mu = np.cumsum(model.mu)
        states[:, 0] = np.searchsorted(cum_mu, u_init, side="right")
        cum = model._cum
        for k in range(1, n):
            rows = cum[states[:, k - 1]]
            # next state = #{j : cum[j] <= u}, matching searchsorted(side="right")
            states[:, k] = (rows <= u[:, k - 1, None]).sum(axis=1)
        return model.observable(states)
    if isinstance(model, IidGaussian):
        z = np.stack([g.standard_normal((n, model.d)) for g in rngs])
        return z @ model._factor.T
    raise TypeError(f"unknown model type {type(model)!r}")


def simulate(model, n: int, seed: int) -> SamplePath:
    """One path (A_0, ..., A_{n-1}); same seed reproduces it bit-for-bit."""
    if n < 1:
        raise ValueError("path length must be at least 1")
    values = _simulate_batch(model, n, _child_rngs(seed, 1))[0]
    return SamplePath(values=values, seed=seed, model_hash=model_hash(model))


def simulate_many(model, n: int, seed: int, replicas: int) -> np.ndarray:
    """Replica paths, shape (replicas, n, d), on disjoint spawned streams.

    Row r equals simulate() run with the r-th spawned child stream, so
    results do not depend on batching.
    """
    if n < 1 or replicas < 1:
        raise ValueError("path length and replica count must be at least 1")
    return _simulate_batch(model, n, _child_rngs(seed, replicas))


def iter_path_chunks(model, n: int, seed: int, replicas: int, chunk: int = 256) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (start_index, values) replica chunks with bounded memory.

    Chunking does not change any replica's path: streams are spawned once
    for all replicas and consumed chunk by chunk.
    """
    rngs = _child_rngs(seed, replicas)
    for lo in range(0, replicas, chunk):
        hi = min(lo + chunk, replicas)
        yield lo, _simulate_batch(model, n, rngs[lo:hi])


def partial_sums(path) -> np.ndarray:
    """Prefix sums S_k = sum_{l<k} A_l for k = 0..n (S_0 = 0).

    The sequential fold is used, so S[k+1] == S[k] + A[k] holds exactly as
    float operations.
    """
    values = path.values if isinstance(path, SamplePath) else np.asarray(path, dtype=float)
    values = np.atleast_2d(values.T).T
    if values.shape[0] == 0:
        raise ValueError("empty path")
    out = np.zeros((values.shape[0] + 1, values.shape[1]))
    np.add.accumulate(values, axis=0, out=out[1:])
    return out


def gaussian_charfn(sigma2: np.ndarray, t: np.ndarray) -> complex:
    """E e^(i<t, Z>) for Z ~ N(0, Sigma2)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return complex(math.exp(-0.5 * float(t @ np.atleast_2d(sigma2) @ t)), 0.0)
