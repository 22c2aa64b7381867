"""
Ground truth by exhaustive enumeration: the optimal configuration, the exact
Gibbs distribution pi_beta, the transition matrix of the random-scan chain,
total-variation distances and the sweep contraction bound

    d_V(mu_{lN}, pi_beta) <= d_V(mu_0, pi_beta) * (1 - exp(-beta N Delta) / N^N)^l

All distribution vectors are dense and indexed by bitmask. Ties resolve to the
smallest bitmask.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from src.core.config import settings
from src.core.exceptions import CapacityError, DimensionMismatchError, SpecError
from src.core.logger import get_logger
from src.services.gaussian_model import (
    Configuration,
    CostCache,
    CostParams,
    ErrorMetric,
    GaussianModel,
    as_cache,
    gaussian_mmse,
    popcounts,
)

logger = get_logger(__name__)

_CHUNK = 1 << 12


def _require(n: int, cap: int, what: str) -> None:
    if n > cap:
        raise CapacityError(n, cap, what)


def enumerate_errors(model: GaussianModel, cache: Optional[CostCache] = None,
                     threads: int = 1, metric: ErrorMetric = gaussian_mmse) -> np.ndarray:
    """E d_B for every bitmask, in bitmask order. Fills (and reuses) the cache."""
    n = model.n
    _require(n, settings.ENUMERATION_CAP, "enumeration")
    size = 1 << n
    if cache is not None and len(cache) == size:
        return np.fromiter((cache.error(b) for b in range(size)), dtype=np.float64, count=size)

    def sweep(start: int) -> np.ndarray:
        stop = min(start + _CHUNK, size)
        if cache is not None:
            return np.fromiter((cache.error(b) for b in range(start, stop)), dtype=np.float64)
        return np.fromiter((metric(model, b) for b in range(start, stop)), dtype=np.float64)

    starts = range(0, size, _CHUNK)
    if threads > 1 and size > _CHUNK:
        with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="enumerate") as pool:
            parts = list(pool.map(sweep, starts))
    else:
        parts = [sweep(s) for s in starts]
    errors = np.concatenate(parts)
    logger.debug(f"enumerated {size} configurations for N = {n}")
    return errors


def enumerate_costs(model: GaussianModel, lam: float, cache: Optional[CostCache] = None,
                    threads: int = 1) -> np.ndarray:
    return enumerate_errors(model, cache, threads) + lam * popcounts(model.n)


def exhaustive_optimum(model: GaussianModel, params: CostParams, cache: Optional[CostCache] = None,
                       threads: int = 1) -> Tuple[Configuration, float]:
    """argmin / min of h over all 2^N configurations."""
    h = enumerate_costs(model, params.lam, cache, threads)
    best = int(np.argmin(h))
    return Configuration(best, model.n), float(h[best])


def exhaustive_constrained_optimum(model: GaussianModel, nbar: int, at_most: bool = False,
                                   cache: Optional[CostCache] = None) -> Tuple[Configuration, float]:
    """
    Minimum error over |B|_1 = nbar (or |B|_1 <= nbar), by walking the
    cardinality slices directly instead of the whole cube.
    """
    n = model.n
    if not 0 <= nbar <= n:
        raise SpecError(f"nbar must lie in [0, {n}], got {nbar}")
    sizes = range(nbar + 1) if at_most else (nbar,)
    total = sum(math.comb(n, k) for k in sizes)
    if total > settings.SLICE_ENUMERATION_LIMIT:
        raise CapacityError(total, settings.SLICE_ENUMERATION_LIMIT,
                            f"enumerating |B|_1 = {nbar} of N = {n} (SLICE_ENUMERATION_LIMIT)", "slice size")
    cache = as_cache(model, cache)
    best: Optional[Tuple[float, int]] = None
    for k in sizes:
        for subset in itertools.combinations(range(n), k):
            bits = sum(1 << j for j in subset)
            candidate = (cache.error(bits), bits)
            if best is None or candidate < best:
                best = candidate
    value, bits = best  # type: ignore[misc]
    return Configuration(bits, n), value


@dataclass
class GibbsDistribution:
    """pi_beta(B) = exp(-beta h(B)) / Z_beta, dense over bitmasks."""

    probs: np.ndarray
    log_partition: float
    beta: float

    @property
    def n(self) -> int:
        return int(self.probs.size).bit_length() - 1

    def expectation(self, values: np.ndarray) -> float:
        support = self.probs > 0
        return float(np.dot(self.probs[support], np.asarray(values)[support]))

    def top_k(self, k: int) -> List[Tuple[int, float]]:
        order = np.lexsort((np.arange(self.probs.size), -self.probs))[:k]
        return [(int(b), float(self.probs[b])) for b in order]


def exact_gibbs_from_costs(h: np.ndarray, beta: float, mask: Optional[np.ndarray] = None) -> GibbsDistribution:
    """
    Gibbs distribution for an explicit cost table. beta = 0 is allowed and
    gives the uniform law; `mask` restricts support (off-mask cost = +inf).
    """
    if beta < 0:
        raise SpecError(f"beta must be nonnegative, got {beta}")
    log_w = -beta * np.asarray(h, dtype=np.float64)
    if mask is not None:
        log_w = np.where(mask, log_w, -np.inf)
    log_z = float(logsumexp(log_w))
    probs = np.exp(log_w - log_z)
    return GibbsDistribution(probs=probs, log_partition=log_z, beta=beta)


def exact_gibbs(model: GaussianModel, params: CostParams, cache: Optional[CostCache] = None,
                threads: int = 1) -> GibbsDistribution:
    _require(model.n, settings.EXACT_GIBBS_CAP, "exact Gibbs distribution")
    return exact_gibbs_from_costs(enumerate_costs(model, params.lam, cache, threads), params.beta)


def restricted_exact_gibbs(model: GaussianModel, beta: float, nbar: int,
                           cache: Optional[CostCache] = None, threads: int = 1) -> GibbsDistribution:
    """pi_beta on the slice |B|_1 = nbar with h = E d_B (activation price is constant there)."""
    n = model.n
    _require(n, settings.EXACT_GIBBS_CAP, "exact Gibbs distribution")
    if not 0 <= nbar <= n:
        raise SpecError(f"nbar must lie in [0, {n}], got {nbar}")
    return exact_gibbs_from_costs(enumerate_errors(model, cache, threads), beta, popcounts(n) == nbar)


@dataclass
class ChainMatrix:
    """One-step transition matrix of the random-scan single-site Gibbs chain."""

    matrix: np.ndarray
    n: int
    beta: float
    lam: float = field(default=0.0)


def tpm_from_costs(h: np.ndarray, n: int, beta: float) -> np.ndarray:
    size = 1 << n
    if h.size != size:
        raise DimensionMismatchError(f"cost table has {h.size} entries, expected {size}")
    idx = np.arange(size)
    matrix = np.zeros((size, size))
    for j in range(n):
        bit = 1 << j
        on, off = idx | bit, idx & ~bit
        p = expit(-beta * (h[on] - h[off]))
        matrix[idx, on] += p / n
        matrix[idx, off] += (1.0 - p) / n
    return matrix


def exact_tpm(model: GaussianModel, params: CostParams, cache: Optional[CostCache] = None) -> ChainMatrix:
    _require(model.n, settings.EXACT_TPM_CAP, "exact transition matrix")
    h = enumerate_costs(model, params.lam, cache)
    return ChainMatrix(tpm_from_costs(h, model.n, params.beta), model.n, params.beta, params.lam)


def stationary_distribution(matrix: np.ndarray) -> np.ndarray:
    """Solve pi P = pi, sum(pi) = 1 directly."""
    size = matrix.shape[0]
    system = matrix.T - np.eye(size)
    system[-1, :] = 1.0
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    return np.linalg.solve(system, rhs)


def dobrushin_bound(params: CostParams, n: int, delta: float, l: int) -> float:
    """Contraction factor (1 - exp(-beta N Delta) / N^N)^l after l sweeps of N steps."""
    if delta < 0 or l < 0 or n < 1:
        raise SpecError(f"need delta >= 0, l >= 0, n >= 1 (got {delta}, {l}, {n})")
    if l == 0:
        return 1.0
    x = math.exp(-params.beta * n * delta - n * math.log(n))
    if x >= 1.0:
        return 0.0
    return math.exp(l * math.log1p(-x))


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatchError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def delta_upper_bound(model: GaussianModel, params: CostParams, cache: Optional[CostCache] = None) -> float:
    """max |h(B) - h(A)|: exact when enumeration is feasible, else tr(M) + lambda N."""
    if model.n <= settings.EXACT_GIBBS_CAP:
        h = enumerate_costs(model, params.lam, cache)
        return float(h.max() - h.min())
    return model.trace + params.lam * model.n


@dataclass
class ContractionStudy:
    """Exact propagation of mu_0 through the chain, compared with the sweep bound."""

    n: int
    delta: float
    tv_by_step: List[float]
    tv_by_sweep: List[float]
    bound_by_sweep: List[float]

    @property
    def violations(self) -> int:
        return sum(tv > bound + 1e-12 for tv, bound in zip(self.tv_by_sweep, self.bound_by_sweep))

    def rows(self) -> List[dict]:
        return [
            {"sweep": l, "tv": tv, "bound": bound}
            for l, (tv, bound) in enumerate(zip(self.tv_by_sweep, self.bound_by_sweep))
        ]


def contraction_study(model: GaussianModel, params: CostParams, sweeps: int,
                      mu0: Optional[np.ndarray] = None, cache: Optional[CostCache] = None) -> ContractionStudy:
    """
    Per-step d_V(mu_0 P^t, pi_beta) for t <= sweeps * N, with the bound
    evaluated at every full sweep. mu_0 defaults to a point mass on the
    least likely configuration.
    """
    n = model.n
    _require(n, settings.EXACT_TPM_CAP, "contraction study")
    h = enumerate_costs(model, params.lam, cache)
    pi = exact_gibbs_from_costs(h, params.beta).probs
    matrix = tpm_from_costs(h, n, params.beta)
    delta = float(h.max() - h.min())

    if mu0 is None:
        mu0 = np.zeros(1 << n)
        mu0[int(np.argmax(h))] = 1.0
    mu = np.asarray(mu0, dtype=np.float64)
    if mu.size != 1 << n:
        raise DimensionMismatchError(f"mu0 has {mu.size} entries, expected {1 << n}")

    tv0 = tv_distance(mu, pi)
    tv_by_step = [tv0]
    for _ in range(sweeps * n):
        mu = mu @ matrix
        tv_by_step.append(tv_distance(mu, pi))
    tv_by_sweep = tv_by_step[::n]
    bound_by_sweep = [dobrushin_bound(params, n, delta, l) * tv0 for l in range(sweeps + 1)]
    study = ContractionStudy(n, delta, tv_by_step, tv_by_sweep, bound_by_sweep)
    logger.info(f"contraction study N={n} beta={params.beta} sweeps={sweeps}: {study.violations} violations")
    return study


def propagate(h: np.ndarray, n: int, mu0: np.ndarray, beta_at: Callable[[int], float], steps: int) -> np.ndarray:
    """
    Exact law of the random-scan chain after `steps` updates when step t uses
    beta_at(t). Applies the N site kernels directly instead of forming P.
    """
    size = 1 << n
    if h.size != size or mu0.size != size:
        raise DimensionMismatchError(f"expected tables of size {size}")
    idx = np.arange(size)
    pairs = []
    for j in range(n):
        bit = 1 << j
        off = idx[(idx & bit) == 0]
        pairs.append((off, off | bit))
    mu = np.asarray(mu0, dtype=np.float64).copy()
    for t in range(steps):
        beta = beta_at(t)
        nxt = np.zeros(size)
        for off, on in pairs:
            p = expit(-beta * (h[on] - h[off]))
            mass = mu[off] + mu[on]
            nxt[on] += mass * p
            nxt[off] += mass * (1.0 - p)
        mu = nxt / n
    return mu
