"""Monte Carlo and exact property checks of the limit-theorem conclusions.

Every test is deterministic given (model, params, seed): replica streams
are spawned from the seed, reductions run in a fixed order, and every
report records its seeds and thresholds.  Statistical pass rules
(p > alpha, bounded ratios, non-increasing top quantiles within a recorded
tolerance) are finite-sample surrogates for the paper-style o(.) claims;
all are config-overridable and echoed in the reports.

Trend tests evaluate at "representative" levels (the last valid level for
each block count) by default: at desk scale the floor functions in the
schedule make directly neighboring valid levels structurally incomparable
(block length doubles while the normalizer grows by a fixed factor), while
representatives trend genuinely.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from . import covariance as cov_mod
from . import models as models_mod
from .coupling import DiscreteDistribution, maximal_coupling, variance_matching_coupling
from .models import DoublingMap, FourierObservable, doubling_bits, doubling_orbit
from .schedule import SchedulerParams, decompose_level, gap_positions, representative_levels

assert FourierObservable is not None  # re-exported for probe callers

__all__ = [
    "TestReport",
    "clt_test",
    "lp_scaling_test",
    "gap_sum_test",
    "block_maxima_test",
    "degenerate_split",
    "DegenerateSplit",
    "coboundary_probe",
    "asip_pipeline_demo",
    "PipelineReport",
    "energy_distance_test",
    "max_workers",
]

DEFAULT_ALPHA = 0.01
DEFAULT_TREND_TOLERANCE = 1.25  # slack on "non-increasing" top quantiles
_CHUNK_ELEMENTS = 1 << 23


def max_workers() -> int:
    """Worker cap from ASIPLAB_THREADS (default 1 = serial)."""
    raw = os.environ.get("ASIPLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _chunk_size(n: int, d: int, replicas: int) -> int:
    return max(1, min(replicas, _CHUNK_ELEMENTS // max(n * d, 1)))


def map_replica_chunks(model, n: int, seed: int, replicas: int, reducer, chunk: int | None = None):
    """Apply ``reducer(values)`` to replica chunks; concatenate in order.

    Chunking and threading never change a replica's path (streams are
    spawned once) and the reassembly order is fixed, so results are
    bit-reproducible for any ASIPLAB_THREADS.
    """
    chunk = chunk or _chunk_size(n, model.d, replicas)
    children = np.random.SeedSequence(seed).spawn(replicas)
    ranges = [(lo, min(lo + chunk, replicas)) for lo in range(0, replicas, chunk)]

    def run(rg):
        lo, hi = rg
        rngs = [np.random.default_rng(s) for s in children[lo:hi]]
        return reducer(models_mod._simulate_batch(model, n, rngs))

    workers = min(max_workers(), len(ranges))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, ranges))
    else:
        parts = [run(rg) for rg in ranges]
    return np.concatenate(parts, axis=0)


@dataclass
class TestReport:
    """Outcome of one validator check, with full reproducibility stamp."""

    name: str
    passed: bool
    statistics: dict
    thresholds: dict
    replicas: int
    seed: int
    runtime_s: float = 0.0
    details: dict = field(default_factory=dict)

    def as_record(self):
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return {
            "test": self.name,
            "passed": bool(self.passed),
            "statistics": clean(self.statistics),
            "thresholds": clean(self.thresholds),
            "replicas": self.replicas,
            "seed": self.seed,
            "runtime_s": round(self.runtime_s, 3),
            "details": clean(self.details),
        }


# ---------------------------------------------------------------------------
# CLT


def _default_directions(d: int) -> np.ndarray:
    if d == 1:
        return np.ones((1, 1))
    dirs = list(np.eye(d))
    dirs.append(np.ones(d) / math.sqrt(d))
    return np.stack(dirs)


def energy_distance_test(x: np.ndarray, y: np.ndarray, rng: np.random.Generator, permutations: int = 200) -> tuple[float, float]:
    """Two-sample energy-distance statistic and permutation p-value."""
    nx, ny = x.shape[0], y.shape[0]
    pool = np.concatenate([x, y])
    dist = np.linalg.norm(pool[:, None, :] - pool[None, :, :], axis=2)

    def stat(ix, iy):
        dxy = dist[np.ix_(ix, iy)].mean()
        dxx = dist[np.ix_(ix, ix)].mean()
        dyy = dist[np.ix_(iy, iy)].mean()
        return 2 * dxy - dxx - dyy

    labels = np.arange(nx + ny)
    observed = stat(labels[:nx], labels[nx:])
    count = 0
    for _ in range(permutations):
        perm = rng.permutation(nx + ny)
        if stat(perm[:nx], perm[nx:]) >= observed - 1e-15:
            count += 1
    return float(observed), (1 + count) / (permutations + 1)


def clt_test(
    model,
    n: int,
    replicas: int,
    sigma2: np.ndarray,
    a: np.ndarray | None = None,
    seed: int = 0,
    directions: np.ndarray | None = None,
    alpha: float = DEFAULT_ALPHA,
    permutations: int = 200,
    energy_subsample: int = 1000,
) -> TestReport:
    """Compare the law of (S_n - n a)/sqrt(n) against N(0, Sigma2).

    Per-direction Kolmogorov-Smirnov on fixed directions (>= 3 for d >= 2)
    plus an energy-distance permutation test for d >= 2; passes when all
    p-values exceed ``alpha``.  Directions in the kernel of Sigma2 must be
    split off first (degenerate_split), otherwise this raises.
    """
    t0 = time.perf_counter()
    if n & (n - 1):
        raise ValueError("n must be a power of 2")
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=float))
    d = model.d
    if a is None:
        a = cov_mod.stationary_mean(model)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    dirs = _default_directions(d) if directions is None else np.atleast_2d(directions)
    for u in dirs:
        if float(u @ sigma2 @ u) <= 1e-12:
            raise ValueError(
                "degenerate direction in Sigma2; run degenerate_split and test on the "
                "nondegenerate part"
            )
    sums = map_replica_chunks(model, n, seed, replicas, lambda v: v.sum(axis=1))
    z = (sums - n * a) / math.sqrt(n)
    pvalues = []
    for u in dirs:
        scale = math.sqrt(float(u @ sigma2 @ u))
        res = scipy.stats.kstest(z @ u, "norm", args=(0.0, scale))
        pvalues.append(float(res.pvalue))
    energy_p = None
    energy_stat = None
    if d >= 2:
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(replicas + 2)[-1])
        m = min(replicas, energy_subsample)
        idx = rng.choice(replicas, size=m, replace=False)
        gauss = rng.multivariate_normal(np.zeros(d), sigma2, size=m)
        energy_stat, energy_p = energy_distance_test(z[idx], gauss, rng, permutations)
    all_p = pvalues + ([energy_p] if energy_p is not None else [])
    return TestReport(
        name="clt",
        passed=bool(all(p > alpha for p in all_p)),
        statistics={
            "ks_pvalues": pvalues,
            "energy_pvalue": energy_p,
            "energy_statistic": energy_stat,
            "directions": dirs,
        },
        thresholds={"alpha": alpha},
        replicas=replicas,
        seed=seed,
        runtime_s=time.perf_counter() - t0,
        details={"n": n, "a": a, "sigma2": sigma2},
    )


# ---------------------------------------------------------------------------
# L^p scaling


def lp_scaling_test(
    model,
    q: float,
    n_list,
    replicas: int = 200,
    seed: int = 0,
    ratio_bound: float = 2.0,
) -> TestReport:
    """||S_n||_q / sqrt(n) drift over dyadic n; passes when max/min <= bound."""
    t0 = time.perf_counter()
    if q <= 2:
        raise ValueError("q must exceed 2")
    n_list = sorted(int(v) for v in n_list)
    n_max = n_list[-1]
    marks = np.asarray(n_list)

    def reducer(values):
        prefix = values.cumsum(axis=1)
        snaps = prefix[:, marks - 1, :]  # S_n at the checkpoints
        return np.linalg.norm(snaps, axis=2)  # (chunk, len(n_list))

    norms = map_replica_chunks(model, n_max, seed, replicas, reducer)
    lq = (norms**q).mean(axis=0) ** (1.0 / q)
    ratios = lq / np.sqrt(marks)
    spread = float(ratios.max() / ratios.min()) if ratios.min() > 0 else math.inf
    return TestReport(
        name="lp_scaling",
        passed=bool(spread <= ratio_bound),
        statistics={"n": n_list, "lq_norms": lq, "normalized": ratios, "spread": spread},
        thresholds={"ratio_bound": ratio_bound, "q": q},
        replicas=replicas,
        seed=seed,
        runtime_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# trend helpers


def _top3_nonincreasing(values: np.ndarray, tolerance: float) -> bool:
    top = values[-3:]
    if len(top) < 2:
        return True
    return bool(all(top[i + 1] <= top[i] * tolerance for i in range(len(top) - 1)))


def gap_sum_test(
    model,
    params: SchedulerParams,
    n_max: int,
    k_list=None,
    replicas: int = 200,
    seed: int = 0,
    quantile: float = 0.95,
    tolerance: float = DEFAULT_TREND_TOLERANCE,
) -> TestReport:
    """Quantiles of |sum_{l<k, l in gaps} A_l| / k^(beta/2 + eps).

    ``k_list`` defaults to the dyadic ends 2^(n+1) of representative valid
    levels up to ``n_max``.  Passes when the top three quantiles are
    non-increasing within the recorded multiplicative tolerance.
    """
    t0 = time.perf_counter()
    if k_list is None:
        reps = representative_levels(n_max, params)
        k_list = [2 ** (n + 1) for n in reps[-6:]]
    k_list = sorted(int(k) for k in k_list)
    if len(k_list) < 3:
        raise ValueError("need at least three evaluation points")
    k_max = k_list[-1]
    gpos = gap_positions(k_max, params)
    cuts = np.searchsorted(gpos, np.asarray(k_list))  # gaps strictly below k

    def reducer(values):
        gv = values[:, gpos, :]
        cs = gv.cumsum(axis=1)
        out = np.empty((values.shape[0], len(k_list)))
        for i, c in enumerate(cuts):
            g = cs[:, c - 1, :] if c > 0 else np.zeros((values.shape[0], values.shape[2]))
            out[:, i] = np.linalg.norm(g, axis=1)
        return out

    sums = map_replica_chunks(model, k_max, seed, replicas, reducer)
    expo = float(params.beta) / 2.0 + float(params.eps)
    normalized = sums / np.power(np.asarray(k_list, dtype=float), expo)
    quants = np.quantile(normalized, quantile, axis=0)
    passed = _top3_nonincreasing(quants, tolerance)
    return TestReport(
        name="gap_sum",
        passed=passed,
        statistics={"k": k_list, "quantiles": quants, "exponent": expo},
        thresholds={"quantile": quantile, "tolerance": tolerance},
        replicas=replicas,
        seed=seed,
        runtime_s=time.perf_counter() - t0,
        details={"beta": str(params.beta), "eps": str(params.eps), "gap_mass": [int(c) for c in cuts]},
    )


def block_maxima_test(
    model,
    params: SchedulerParams,
    n_max: int,
    levels=None,
    p: float = math.inf,
    replicas: int = 200,
    seed: int = 0,
    quantile: float = 0.95,
    tolerance: float = DEFAULT_TREND_TOLERANCE,
) -> TestReport:
    """Within-block running-sum maxima, normalized by 2^(((1-b)/2+b/p+e)n).

    Per-block maxima are pooled over replicas and blocks of each level;
    passes when the top three level quantiles are non-increasing within
    the recorded tolerance.
    """
    t0 = time.perf_counter()
    if levels is None:
        levels = representative_levels(n_max, params)[-6:]
    levels = sorted(int(n) for n in levels)
    if len(levels) < 3:
        raise ValueError("need at least three levels")
    scheds = {n: decompose_level(n, params) for n in levels}
    for n, s in scheds.items():
        if not s.valid:
            raise ValueError(f"level {n} is not valid for these parameters: {s.reason}")
    n_path = 2 ** (levels[-1] + 1)
    beta_over_p = 0.0 if math.isinf(p) else float(params.beta) / p
    nu = (1.0 - float(params.beta)) / 2.0 + beta_over_p + float(params.eps)

    def reducer(values):
        prefix = np.concatenate(
            [np.zeros((values.shape[0], 1, values.shape[2])), values.cumsum(axis=1)], axis=1
        )
        cols = []
        for n in levels:
            maxima = []
            for b in scheds[n].intervals:
                seg = prefix[:, b.start + 1 : b.end + 1, :] - prefix[:, b.start : b.start + 1, :]
                maxima.append(np.linalg.norm(seg, axis=2).max(axis=1))
            cols.append(np.stack(maxima, axis=1))  # (chunk, F(n))
        return np.concatenate(cols, axis=1)

    pooled = map_replica_chunks(model, n_path, seed, replicas, reducer)
    quants = []
    offset = 0
    for n in levels:
        f_n = len(scheds[n].intervals)
        block = pooled[:, offset : offset + f_n]
        offset += f_n
        quants.append(float(np.quantile(block.ravel(), quantile)) / 2.0 ** (nu * n))
    quants = np.asarray(quants)
    passed = _top3_nonincreasing(quants, tolerance)
    return TestReport(
        name="block_maxima",
        passed=passed,
        statistics={"levels": levels, "quantiles": quants, "exponent": nu},
        thresholds={"quantile": quantile, "tolerance": tolerance, "p": None if math.isinf(p) else p},
        replicas=replicas,
        seed=seed,
        runtime_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# degenerate directions


@dataclass(frozen=True)
class DegenerateSplit:
    """Orthogonal split R^d = E + F with Sigma2 nondegenerate on E only."""

    e_basis: np.ndarray  # (d, rank)
    f_basis: np.ndarray  # (d, d - rank)
    rank: int
    eigenvalues: np.ndarray


def degenerate_split(sigma2: np.ndarray, tol: float = 1e-10) -> DegenerateSplit:
    """Eigendecomposition split of Sigma2 into range and kernel parts."""
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=float))
    scale = max(1.0, float(np.abs(sigma2).max()))
    if np.linalg.norm(sigma2 - sigma2.T) > 1e-10 * scale:
        raise ValueError("Sigma2 must be symmetric")
    evals, evecs = np.linalg.eigh(sigma2)
    keep = evals > tol * max(1.0, evals.max(initial=0.0))
    e_basis = evecs[:, keep]
    f_basis = evecs[:, ~keep]
    recon = (evecs * evals) @ evecs.T
    if np.linalg.norm(recon - sigma2) > 1e-10 * scale:
        raise AssertionError("eigendecomposition reconstruction failed")
    return DegenerateSplit(e_basis, f_basis, int(keep.sum()), evals)


# ---------------------------------------------------------------------------
# coboundary probe


def coboundary_probe(
    model: DoublingMap,
    g: FourierObservable,
    n: int = 2**16,
    replicas: int = 8,
    seed: int = 0,
    tol: float = 1e-8,
) -> TestReport:
    """Check the telescoping bound sup_k |S_k| <= 2 sup|g| for f = g - g∘T.

    Verifies per path that f matches g - g∘T on samples, that S_k equals
    g(x_0) - g(x_k) up to accumulated rounding, the exact telescoping
    bound, and that the spectral limiting variance vanishes.
    """
    t0 = time.perf_counter()
    if not isinstance(model, DoublingMap):
        raise ValueError("coboundary probe is defined for the doubling map")
    sup_g = g.sup_bound()
    children = np.random.SeedSequence(seed).spawn(replicas)
    worst_mismatch = 0.0
    worst_telescope = 0.0
    sup_s = 0.0
    for child in children:
        bits = doubling_bits(np.random.default_rng(child), n)
        x = doubling_orbit(bits, n)
        fv = model.observable(x)
        gv = g(x)
        g_shift = g(np.mod(2.0 * x, 1.0))
        worst_mismatch = max(worst_mismatch, float(np.abs(fv - (gv - g_shift)).max()))
        s = fv.cumsum(axis=0)
        norms = np.linalg.norm(s, axis=1)
        sup_s = max(sup_s, float(norms.max()))
        tele = s - (gv[0] - gv)
        # S_k sums f up to k-1, so compare against g(x_0) - g(x_k) shifted by one
        tele = s[:-1] - (gv[0] - gv[1:])
        worst_telescope = max(worst_telescope, float(np.abs(tele).max()))
    if worst_mismatch > 1e-9:
        raise ValueError(f"observable is not g - g∘T on samples: max mismatch {worst_mismatch:.3e}")
    sig = cov_mod.sigma2_spectral(model)
    sigma2_norm = float(np.linalg.norm(sig.sigma2, 2))
    passed = bool(sup_s <= 2.0 * sup_g + 1e-9 and worst_telescope <= tol and sigma2_norm <= tol)
    return TestReport(
        name="coboundary",
        passed=passed,
        statistics={
            "sup_partial_sum": sup_s,
            "telescoping_residual": worst_telescope,
            "sample_mismatch": worst_mismatch,
            "sigma2_norm": sigma2_norm,
        },
        thresholds={"bound": 2.0 * sup_g, "tol": tol},
        replicas=replicas,
        seed=seed,
        runtime_s=time.perf_counter() - t0,
        details={"n": n},
    )


# ---------------------------------------------------------------------------
# end-to-end pipeline diagnostic


@dataclass
class PipelineReport:
    """Diagnostic record of the block -> independent -> gaussian pipeline.

    The fitted exponent measures the reassembled discrepancy path against
    the theorem's target; it validates pipeline consistency, it does not
    certify the almost-sure statement.
    """

    fitted_exponent: float
    lambda_target: float
    exponent_ok: bool | None
    stage_records: list
    k_values: np.ndarray
    sup_discrepancy: np.ndarray
    max_stage_error_bins: float
    replicas: int
    seed: int
    levels: list
    note: str = (
        "diagnostic: measured discrepancy consistency with the target exponent; "
        "not a proof of the almost-sure statement"
    )

    def as_record(self):
        return {
            "fitted_exponent": self.fitted_exponent,
            "lambda_target": self.lambda_target,
            "exponent_ok": self.exponent_ok,
            "stages": self.stage_records,
            "k": self.k_values.tolist(),
            "sup_discrepancy": self.sup_discrepancy.tolist(),
            "max_stage_error_bins": self.max_stage_error_bins,
            "replicas": self.replicas,
            "seed": self.seed,
            "levels": self.levels,
            "note": self.note,
        }


def _pair_histogram_tv(x: np.ndarray, y: np.ndarray, bins: int, rng: np.random.Generator):
    """TV between the 2-d histogram of (x, y) and the product of marginals.

    Returns (tv_raw, tv_null, plan_mismatch, bin_width): the null shuffles
    the pairing to estimate the pure sampling bias of the histogram TV, and
    the plan mismatch comes from an explicit maximal coupling between the
    joint and product histograms.
    """
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    span = max(hi - lo, 1e-12)
    edges = np.linspace(lo - 0.01 * span, hi + 0.01 * span, bins + 1)
    joint, _, _ = np.histogram2d(x, y, bins=[edges, edges])
    total = joint.sum()
    pj = joint / total
    prod = np.outer(pj.sum(axis=1), pj.sum(axis=0))
    tv_raw = 0.5 * float(np.abs(pj - prod).sum())
    y_shuf = y[rng.permutation(len(y))]
    joint0, _, _ = np.histogram2d(x, y_shuf, bins=[edges, edges])
    pj0 = joint0 / total
    prod0 = np.outer(pj0.sum(axis=1), pj0.sum(axis=0))
    tv_null = 0.5 * float(np.abs(pj0 - prod0).sum())
    centers = (edges[:-1] + edges[1:]) / 2.0
    grid = np.stack(np.meshgrid(centers, centers, indexing="ij"), axis=-1).reshape(-1, 2)
    f_joint = DiscreteDistribution(grid, (pj / pj.sum()).ravel())
    f_prod = DiscreteDistribution(grid, (prod / prod.sum()).ravel())
    plan = maximal_coupling(f_joint, f_prod)
    return tv_raw, tv_null, float(plan.mismatch_probability), float(edges[1] - edges[0])


def _quantile_gaussianize(x: np.ndarray, var: float) -> np.ndarray:
    """Monotone quantile coupling of the pooled sample with N(0, var)."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=float)
    ranks[order] = np.arange(len(x)) + 0.5
    return math.sqrt(var) * scipy.stats.norm.ppf(ranks / len(x))


def asip_pipeline_demo(
    model,
    params: SchedulerParams,
    p: float = math.inf,
    seed: int = 0,
    replicas: int = 2048,
    n_min: int = 8,
    n_max: int = 16,
    bins: int = 32,
    exponent_bound: float | None = None,
) -> PipelineReport:
    """End-to-end diagnostic of the blocking/coupling pipeline (d = 1).

    Stages: (i) schedule blocks, (ii) block sums, (iii) histogram maximal
    coupling toward independence (error recorded; the pathwise surrogate
    keeps the identity coupling), (iv) gaussianization by pooled quantile
    coupling, (v) variance matching toward N(0, |I| Sigma2), (vi) the
    reassembled discrepancy path D_k = sum(X - Z) with a log-log fit of
    sup_{j<=k} |D_j| against k, compared to lambda = p/(4p-4) + eps.
    """
    t0 = time.perf_counter()
    if model.d > 2:
        raise ValueError("pipeline demo is limited to d <= 2 (histogram budget)")
    if model.d != 1:
        raise ValueError("this implementation ships the d = 1 pipeline")
    sig = cov_mod.sigma2_spectral(model)
    sigma2 = float(np.atleast_2d(sig.sigma2)[0, 0])
    if sigma2 <= 1e-10:
        raise ValueError("degenerate covariance: split off the kernel first")
    levels = [n for n in range(n_min, n_max + 1) if decompose_level(n, params).valid]
    if len(levels) < 3:
        raise ValueError("not enough valid levels in the requested range")
    scheds = [decompose_level(n, params) for n in levels]
    blocks = [b for s in scheds for b in s.intervals]
    level_of = np.array([b.level for b in blocks])
    ilen = np.array([b.length for b in blocks])
    ends = np.array([b.end for b in blocks])
    n_path = 2 ** (levels[-1] + 1)

    def reducer(values):
        prefix = np.concatenate([np.zeros((values.shape[0], 1, 1)), values.cumsum(axis=1)], axis=1)
        return np.stack([prefix[:, b.end, 0] - prefix[:, b.start, 0] for b in blocks], axis=1)

    x = map_replica_chunks(model, n_path, seed, replicas, reducer)  # (R, B)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0].spawn(3)[2])

    stage_records = []
    z = np.empty_like(x)
    max_err_bins = 0.0
    for n in levels:
        sel = level_of == n
        pool = x[:, sel].ravel()
        f_n = int(sel.sum())
        # stage (iii): dependence error of adjacent pairs, debiased
        cols = np.nonzero(sel)[0]
        if f_n >= 2:
            xs = x[:, cols[:-1]].ravel()
            ys = x[:, cols[1:]].ravel()
            tv_raw, tv_null, plan_mismatch, bin_width = _pair_histogram_tv(xs, ys, bins, rng)
        else:
            tv_raw = tv_null = plan_mismatch = 0.0
            bin_width = (pool.max() - pool.min() + 1e-12) / bins
        tv = max(tv_raw - tv_null, 0.0)
        # stage (iv): pooled quantile gaussianization
        var_hat = float(pool.var())
        if var_hat <= 0:
            raise ValueError(f"level {n}: degenerate block-sum variance")
        g = _quantile_gaussianize(pool, var_hat)
        err_iv = float(np.quantile(np.abs(g - pool), 0.95))
        # stage (v): variance matching toward N(0, |I| Sigma2)
        target = float(ilen[sel][0]) * sigma2
        vm = variance_matching_coupling(np.array([[var_hat]]), np.array([[target]]))
        w = rng.standard_normal(pool.shape[0]) * math.sqrt(max(vm.m_matrix[0, 0], 0.0))
        e = g + w
        resid_sd = math.sqrt(max(vm.cov_z[0, 0] - vm.cov_z[0, 0] ** 2 / (vm.cov_z[0, 0] + vm.delta), 0.0))
        z_pool = vm._a[0, 0] * e + rng.standard_normal(pool.shape[0]) * resid_sd
        err_v = float(np.quantile(np.abs(z_pool - g), 0.95))
        z[:, sel] = z_pool.reshape(replicas, f_n)
        max_err_bins = max(max_err_bins, err_iv / bin_width, err_v / bin_width)
        stage_records.append(
            {
                "level": n,
                "blocks": f_n,
                "block_length": int(ilen[sel][0]),
                "bin_width": bin_width,
                "tv_raw": tv_raw,
                "tv_null": tv_null,
                "tv_debiased": tv,
                "plan_mismatch": plan_mismatch,
                "stage_iii_pathwise": 0.0,
                "stage_iv_q95": err_iv,
                "stage_v_q95": err_v,
                "var_hat": var_hat,
                "var_target": target,
                "delta": vm.delta,
            }
        )

    diff = np.cumsum(x - z, axis=1)
    sup = np.maximum.accumulate(np.abs(diff), axis=1)
    sup_median = np.median(sup, axis=0)
    k = ends.astype(float)
    keep = k >= 2 ** (levels[0] + 1)
    slope, _ = np.polyfit(np.log(k[keep]), np.log(np.maximum(sup_median[keep], 1e-12)), 1)
    lam = 0.25 if math.isinf(p) else p / (4.0 * p - 4.0)
    lam_target = lam + float(params.eps)
    exponent_ok = None if exponent_bound is None else bool(slope <= exponent_bound)
    report = PipelineReport(
        fitted_exponent=float(slope),
        lambda_target=lam_target,
        exponent_ok=exponent_ok,
        stage_records=stage_records,
        k_values=ends,
        sup_discrepancy=sup_median,
        max_stage_error_bins=float(max_err_bins),
        replicas=replicas,
        seed=seed,
        levels=levels,
    )
    report.runtime_s = time.perf_counter() - t0
    return report
