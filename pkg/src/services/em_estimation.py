"""
Sequential sensor sampling when the data law is only known up to a
parameter: X ~ Normal(theta * 1, M), M known, theta unknown.

EM runs on the accumulated partial observations. The E-step fills the
unobserved coordinates with their conditional mean under the current theta;
the M-step is the generalized-least-squares mean of the completed vectors.

Under this family the expected remaining MMSE of a candidate set does not
depend on theta, so selection reduces to the Schur-complement criterion and
EM only shapes the estimate and the reconstruction. None of the selection
rules here is optimal.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve

from src.core.config import settings
from src.core.exceptions import NumericalDegeneracyError, SensorSelectError, SpecError
from src.core.logger import get_logger
from src.services.baselines import best_addition
from src.services.exact_oracle import exhaustive_constrained_optimum
from src.services.gaussian_model import (
    Configuration,
    CostCache,
    GaussianModel,
    as_cache,
    factor_spd,
)
from src.services.gibbs_samplers import slice_argmin_by_gibbs

logger = get_logger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MONOTONE_TOL = 1e-9


class EMMonotonicityError(SensorSelectError):
    pass


@dataclass
class PartialObservation:
    """Values of the coordinates in `observed`, in increasing index order."""

    observed: Configuration
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.observed.popcount == 0:
            raise SpecError("an observation needs at least one observed coordinate")
        if self.values.shape[0] != self.observed.popcount:
            raise SpecError(
                f"{self.values.shape[0]} values for {self.observed.popcount} observed coordinates"
            )
        if not np.all(np.isfinite(self.values)):
            raise SpecError("observation has non-finite values")

    @classmethod
    def from_full(cls, x: np.ndarray, observed: Configuration) -> PartialObservation:
        return cls(observed, np.asarray(x)[list(observed.active())])


@dataclass
class ObservationGroup:
    """Sufficient statistics of every observation sharing one observed set."""

    count: int
    total: np.ndarray
    second_moment: np.ndarray


@dataclass
class ObservationPool:
    n: int
    groups: Dict[int, ObservationGroup] = field(default_factory=dict)

    def add(self, obs: PartialObservation) -> None:
        if obs.observed.n != self.n:
            raise SpecError(f"observation over n = {obs.observed.n}, pool has n = {self.n}")
        x = obs.values
        group = self.groups.get(obs.observed.bits)
        if group is None:
            self.groups[obs.observed.bits] = ObservationGroup(1, x.copy(), np.outer(x, x))
            return
        group.count += 1
        group.total += x
        group.second_moment += np.outer(x, x)

    @property
    def size(self) -> int:
        return sum(g.count for g in self.groups.values())

    def __iter__(self) -> Iterator[Tuple[int, ObservationGroup]]:
        return iter(sorted(self.groups.items()))


@dataclass
class _Block:
    factor: tuple
    gain: np.ndarray
    ones_precision: np.ndarray
    ones_quad: float
    logdet: float


class ParamFamily(ABC):
    """A Gaussian family with known covariance and an unknown parameter."""

    criterion_is_theta_free: bool = False

    @property
    @abstractmethod
    def theta(self) -> float: ...

    @abstractmethod
    def with_theta(self, theta: float) -> ParamFamily: ...

    @abstractmethod
    def expected_error(self, bits: int) -> float: ...

    @abstractmethod
    def e_step(self, pool: ObservationPool) -> np.ndarray:
        """Sum over all observations of the completed data vector."""

    @abstractmethod
    def m_step(self, completed_sum: np.ndarray, count: int) -> float: ...

    @abstractmethod
    def observed_loglik(self, pool: ObservationPool) -> float: ...

    @abstractmethod
    def reconstruct(self, obs: PartialObservation) -> np.ndarray: ...


@dataclass
class CommonMeanFamily(ParamFamily):
    model: GaussianModel
    theta_: float = 0.0
    cache: Optional[CostCache] = None
    _blocks: Dict[int, _Block] = field(default_factory=dict, repr=False)
    _full: Optional[Tuple[np.ndarray, float]] = field(default=None, repr=False)

    criterion_is_theta_free = True

    def __post_init__(self):
        if not math.isfinite(self.theta_):
            raise SpecError(f"theta must be finite, got {self.theta_}")
        self.cache = as_cache(self.model, self.cache)

    @property
    def theta(self) -> float:
        return self.theta_

    def with_theta(self, theta: float) -> CommonMeanFamily:
        return replace(self, theta_=float(theta))

    def expected_error(self, bits: int) -> float:
        return self.cache.error(bits)  # type: ignore[union-attr]

    def _block(self, bits: int) -> _Block:
        block = self._blocks.get(bits)
        if block is not None:
            return block
        n = self.model.n
        s = [k for k in range(n) if bits >> k & 1]
        c = [k for k in range(n) if not bits >> k & 1]
        m = self.model.covariance
        try:
            factor, _ = factor_spd(m[np.ix_(s, s)], self.model.jitter)
        except LinAlgError:
            raise NumericalDegeneracyError(bits, s, settings.MMSE_JITTER_MAX)
        gain = cho_solve(factor, m[np.ix_(s, c)], check_finite=False).T if c else np.zeros((0, len(s)))
        ones_precision = cho_solve(factor, np.ones(len(s)), check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        block = _Block(factor, gain, ones_precision, float(ones_precision.sum()), logdet)
        self._blocks[bits] = block
        return block

    def _full_weights(self) -> Tuple[np.ndarray, float]:
        if self._full is None:
            block = self._block((1 << self.model.n) - 1)
            self._full = (block.ones_precision, block.ones_quad)
        return self._full

    def _complete(self, bits: int, total: np.ndarray, count: int) -> np.ndarray:
        n = self.model.n
        s = [k for k in range(n) if bits >> k & 1]
        c = [k for k in range(n) if not bits >> k & 1]
        out = np.empty(n)
        out[s] = total
        if c:
            block = self._block(bits)
            out[c] = count * self.theta_ + block.gain @ (total - count * self.theta_)
        return out

    def e_step(self, pool: ObservationPool) -> np.ndarray:
        completed = np.zeros(self.model.n)
        for bits, group in pool:
            completed += self._complete(bits, group.total, group.count)
        return completed

    def m_step(self, completed_sum: np.ndarray, count: int) -> float:
        weights, quad = self._full_weights()
        return float(weights @ completed_sum) / (count * quad)

    def observed_loglik(self, pool: ObservationPool) -> float:
        theta = self.theta_
        value = 0.0
        for bits, group in pool:
            block = self._block(bits)
            k = group.total.shape[0]
            quad = float(np.trace(cho_solve(block.factor, group.second_moment, check_finite=False)))
            cross = float(block.ones_precision @ group.total)
            value -= 0.5 * (quad - 2.0 * theta * cross + group.count * theta ** 2 * block.ones_quad)
            value -= 0.5 * group.count * (block.logdet + k * LOG_2PI)
        return value

    def observed_mle(self, pool: ObservationPool) -> float:
        """Closed-form maximizer of the observed likelihood (the EM fixed point)."""
        num = sum(float(self._block(b).ones_precision @ g.total) for b, g in pool)
        den = sum(g.count * self._block(b).ones_quad for b, g in pool)
        return num / den

    def reconstruct(self, obs: PartialObservation) -> np.ndarray:
        return self._complete(obs.observed.bits, obs.values, 1)


@dataclass
class EMResult:
    family: ParamFamily
    iterations: int
    converged: bool
    loglik: List[float]
    thetas: List[float]


def _em_map(family: ParamFamily, pool: ObservationPool, count: int) -> float:
    return family.m_step(family.e_step(pool), count)


def _contraction_rate(family: ParamFamily, pool: ObservationPool, count: int,
                      theta: float, stepped: float) -> Optional[float]:
    """Chord slope of the EM map between theta and a point one unit-scale away; None if not contracting."""
    shifted = theta + max(1.0, abs(theta))
    rate = (_em_map(family.with_theta(shifted), pool, count) - stepped) / (shifted - theta)
    if not math.isfinite(rate) or rate >= 1.0:
        return None
    return max(rate, 0.0)


def run_em(family: ParamFamily, pool: ObservationPool, max_iters: Optional[int] = None,
           tol: Optional[float] = None) -> EMResult:
    """
    Iterate E and M steps from family.theta.

    Every EM step is followed by a secant jump toward the fixed point of the
    EM map, kept only when it does not lower the observed log-likelihood.
    Stops once the estimated distance to the fixed point,
    |theta_new - theta_old| / (1 - rate), is <= tol, or after max_iters.
    Raises EMMonotonicityError if a plain EM step lowers the observed
    log-likelihood.
    """
    max_iters = settings.EM_MAX_ITERS if max_iters is None else max_iters
    tol = settings.EM_TOL if tol is None else tol
    if pool.size == 0:
        raise SpecError("EM needs at least one observation")
    if max_iters < 1:
        raise SpecError(f"max_iters must be >= 1, got {max_iters}")

    count = pool.size
    loglik = [family.observed_loglik(pool)]
    thetas = [family.theta]
    converged = False
    iterations = 0
    distance = math.inf
    while iterations < max_iters:
        theta = family.theta
        stepped = _em_map(family, pool, count)
        updated = family.with_theta(stepped)
        iterations += 1
        ll = updated.observed_loglik(pool)
        if ll < loglik[-1] - MONOTONE_TOL * max(1.0, abs(loglik[-1])):
            raise EMMonotonicityError(
                f"observed log-likelihood fell from {loglik[-1]:.12g} to {ll:.12g} at iteration {iterations}"
            )
        rate = _contraction_rate(family, pool, count, theta, stepped)
        step = abs(stepped - theta)
        distance = step if rate is None else step / (1.0 - rate)
        if distance <= tol:
            converged = True
        elif rate is not None:
            jumped = family.with_theta(theta + (stepped - theta) / (1.0 - rate))
            jumped_ll = jumped.observed_loglik(pool)
            if jumped_ll >= ll:
                updated, ll = jumped, jumped_ll
        family = updated
        loglik.append(ll)
        thetas.append(family.theta)
        if converged:
            break
    if not converged:
        logger.warning(f"EM stopped at max_iters = {max_iters}, distance to fixed point {distance:.3g}")
    return EMResult(family, iterations, converged, loglik, thetas)


def _fit_observation(family: ParamFamily, obs: PartialObservation, max_iters: Optional[int],
                     tol: Optional[float]) -> EMResult:
    pool = ObservationPool(obs.observed.n)
    pool.add(obs)
    return run_em(family, pool, max_iters, tol)


def em_fit(family: ParamFamily, obs: PartialObservation, max_iters: Optional[int] = None,
           tol: Optional[float] = None) -> ParamFamily:
    return _fit_observation(family, obs, max_iters, tol).family


@dataclass
class StaticSelection:
    order: List[int]
    family: ParamFamily
    reconstruction: np.ndarray
    theta_trace: List[float]
    converged: bool = True

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "theta": self.family.theta,
            "theta_trace": self.theta_trace,
            "reconstruction": self.reconstruction,
            "converged": self.converged,
        }


def em_static_select(family0: ParamFamily, true_data: Callable[[int], float], nbar: int,
                     max_iters: Optional[int] = None, tol: Optional[float] = None) -> StaticSelection:
    """
    Sample one coordinate of a single static realization at a time: pick the
    sensor minimizing the expected remaining error under the current
    estimate, read its value from `true_data`, refit theta by EM, repeat until
    nbar sensors are sampled.
    """
    if not isinstance(family0, CommonMeanFamily):
        raise SpecError("static selection is implemented for the common-mean family")
    n = family0.model.n
    if not 1 <= nbar <= n:
        raise SpecError(f"nbar must lie in [1, {n}], got {nbar}")

    family: ParamFamily = family0
    bits = 0
    order: List[int] = []
    values: Dict[int, float] = {}
    theta_trace = [family.theta]
    converged = True
    for _ in range(nbar):
        j, _ = best_addition(family.expected_error, bits, n)
        bits |= 1 << j
        order.append(j)
        values[j] = float(true_data(j))
        observed = Configuration(bits, n)
        obs = PartialObservation(observed, np.array([values[k] for k in observed.active()]))
        fit = _fit_observation(family, obs, max_iters, tol)
        family = fit.family
        converged = converged and fit.converged
        theta_trace.append(family.theta)
        logger.debug(f"em static: sampled sensor {j}, theta = {family.theta:.6g}")

    return StaticSelection(order, family, family.reconstruct(obs), theta_trace, converged)


@dataclass
class SequentialSelection:
    selections: List[Configuration]
    theta_trace: List[float]
    converged: bool = True

    COLUMNS = ("t", "bits_hex", "popcount", "theta")

    def rows(self) -> List[dict]:
        return [
            {"t": t, "bits_hex": b.to_hex(), "popcount": b.popcount, "theta": theta}
            for t, (b, theta) in enumerate(zip(self.selections, self.theta_trace[1:]), start=1)
        ]


def slice_argmin(family: ParamFamily, model: GaussianModel, nbar: int, seed: int) -> Configuration:
    """argmin of the expected error over |B|_1 = nbar; enumerated when the slice is small enough."""
    if math.comb(model.n, nbar) <= settings.SLICE_ENUMERATION_LIMIT:
        config, _ = exhaustive_constrained_optimum(model, nbar, cache=getattr(family, "cache", None))
        return config
    logger.info(f"slice C({model.n}, {nbar}) too large to list, searching it with fixed-cardinality gibbs")
    return slice_argmin_by_gibbs(model, nbar, seed, cache=getattr(family, "cache", None))


def em_sequential_select(family0: ParamFamily, stream: Callable[[int], np.ndarray], nbar: int, slots: int,
                         seed: int = 0, max_iters: Optional[int] = None,
                         tol: Optional[float] = None) -> SequentialSelection:
    """
    Per slot t: choose B(t) minimizing the expected error over |B|_1 = nbar
    given theta_t, observe the snapshot stream(t) on B(t), then refit theta by
    EM on every observation so far.
    """
    if not isinstance(family0, CommonMeanFamily):
        raise SpecError("sequential selection is implemented for the common-mean family")
    model = family0.model
    if not 1 <= nbar <= model.n:
        raise SpecError(f"nbar must lie in [1, {model.n}], got {nbar}")
    if slots < 1:
        raise SpecError(f"slots must be >= 1, got {slots}")

    family: ParamFamily = family0
    pool = ObservationPool(model.n)
    selections: List[Configuration] = []
    theta_trace = [family.theta]
    selection: Optional[Configuration] = None
    converged = True
    for t in range(1, slots + 1):
        if selection is None or not family.criterion_is_theta_free:
            selection = slice_argmin(family, model, nbar, seed)
        x = np.asarray(stream(t), dtype=np.float64)
        pool.add(PartialObservation.from_full(x, selection))
        fit = run_em(family, pool, max_iters, tol)
        family = fit.family
        converged = converged and fit.converged
        selections.append(selection)
        theta_trace.append(family.theta)

    logger.log_structured("INFO", {
        "event": "em_sequential_finished", "n": model.n, "nbar": nbar, "slots": slots,
        "theta": family.theta, "selection": selection.to_hex(), "converged": converged,  # type: ignore[union-attr]
    })
    return SequentialSelection(selections, theta_trace, converged)


@dataclass
class GaussianSource:
    """Seeded draws from Normal(theta * 1, M): iid snapshots, or one static realization."""

    model: GaussianModel
    theta: float
    seed: int
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def draw(self) -> np.ndarray:
        mean = np.full(self.model.n, self.theta)
        return self._rng.multivariate_normal(mean, self.model.covariance, method="eigh")

    def snapshot_stream(self) -> Callable[[int], np.ndarray]:
        return lambda t: self.draw()

    def static_oracle(self) -> Tuple[Callable[[int], float], np.ndarray]:
        x = self.draw()
        return (lambda j: float(x[j])), x
