"""
Random-scan single-site Gibbs samplers over activation masks.

  - basic:    fixed beta; stationary law pi_beta.
  - modified: beta(t) = beta0 * log(1 + t) with beta0 * N * Delta < 1.
  - fixed cardinality: swap moves that keep |B|_1 = nbar; stationary law is
    pi_beta restricted to that slice.

Every run is deterministic given its seed. Chains mutate their ChainState in
place; the step functions return it for chaining.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from src.core.exceptions import ChainInvariantError, ConfigurationError, SpecError
from src.core.logger import get_logger
from src.services.exact_oracle import delta_upper_bound
from src.services.gaussian_model import (
    Configuration,
    CostCache,
    GaussianModel,
    as_cache,
    make_params,
)

logger = get_logger(__name__)

CostOf = Callable[[int], float]


@dataclass
class ChainState:
    config: Configuration
    rng: np.random.Generator
    cost: float
    best_config: Configuration
    best_cost: float
    t: int = 0
    last_improvement: int = 0

    @property
    def best_seen(self) -> Tuple[Configuration, float]:
        return self.best_config, self.best_cost

    def _moved_to(self, bits: int, cost: float) -> None:
        if bits != self.config.bits:
            self.config = Configuration(bits, self.config.n)
        self.cost = cost
        if cost < self.best_cost:
            self.best_config, self.best_cost = self.config, cost
            self.last_improvement = self.t


class BetaSchedule(BaseModel):
    """
    Inverse-temperature schedule. A logarithmic schedule carries the witness
    (n, delta_hat) and refuses beta0 * n * delta_hat >= 1.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["fixed", "logarithmic"] = "fixed"
    beta0: float = Field(gt=0.0)
    n: Optional[int] = Field(default=None, ge=1)
    delta_hat: Optional[float] = Field(default=None, ge=0.0)

    @model_validator(mode="after")
    def _check_witness(self) -> BetaSchedule:
        if self.kind == "logarithmic":
            if self.n is None or self.delta_hat is None:
                raise ConfigurationError("a logarithmic schedule needs n and delta_hat")
            if self.beta0 * self.n * self.delta_hat >= 1.0:
                raise ConfigurationError(
                    f"beta(0) * N * Delta must be < 1: beta(0) = {self.beta0}, "
                    f"N = {self.n}, Delta = {self.delta_hat}"
                )
        return self

    @classmethod
    def fixed(cls, beta: float) -> BetaSchedule:
        return cls(kind="fixed", beta0=beta)

    @classmethod
    def logarithmic(cls, beta0: float, n: int, delta_hat: float) -> BetaSchedule:
        return cls(kind="logarithmic", beta0=beta0, n=n, delta_hat=delta_hat)

    @classmethod
    def logarithmic_for(cls, model: GaussianModel, lam: float, beta0: float,
                        cache: Optional[CostCache] = None) -> BetaSchedule:
        delta = delta_upper_bound(model, make_params(lam), cache)
        return cls.logarithmic(beta0, model.n, delta)

    def beta_at(self, t: int) -> float:
        if self.kind == "fixed":
            return self.beta0
        return self.beta0 * float(np.log1p(t))


@dataclass
class GibbsTrace:
    """Thinned record of a run: one row every `stride` steps."""

    n: int
    stride: int = 1
    t: List[int] = field(default_factory=list)
    beta: List[float] = field(default_factory=list)
    lam: List[float] = field(default_factory=list)
    bits: List[int] = field(default_factory=list)
    popcount: List[int] = field(default_factory=list)
    cost: List[float] = field(default_factory=list)
    stopped_early: bool = False
    visits: Optional[np.ndarray] = None

    COLUMNS = ("t", "beta", "lambda", "bits_hex", "popcount", "cost")

    def record(self, state: ChainState, beta: float, lam: float) -> None:
        self.t.append(state.t)
        self.beta.append(beta)
        self.lam.append(lam)
        self.bits.append(state.config.bits)
        self.popcount.append(state.config.popcount)
        self.cost.append(state.cost)

    def __len__(self):
        return len(self.t)

    def rows(self) -> List[dict]:
        return [
            {"t": t, "beta": b, "lambda": l, "bits_hex": f"{bits:x}", "popcount": p, "cost": c}
            for t, b, l, bits, p, c in zip(self.t, self.beta, self.lam, self.bits, self.popcount, self.cost)
        ]

    def empirical_distribution(self) -> np.ndarray:
        if self.visits is None:
            raise SpecError("run was not asked to count visits")
        return self.visits / self.visits.sum()


def _random_configuration(n: int, rng: np.random.Generator) -> Configuration:
    return Configuration.from_array(rng.integers(0, 2, size=n))


def init_chain(n: int, h: CostOf, seed: int, initial: Optional[Configuration] = None) -> ChainState:
    rng = np.random.default_rng(seed)
    config = initial if initial is not None else _random_configuration(n, rng)
    value = h(config.bits)
    return ChainState(config=config, rng=rng, cost=value, best_config=config, best_cost=value)


def site_update(state: ChainState, h: CostOf, beta: float) -> ChainState:
    """Resample one uniformly chosen bit from its conditional under exp(-beta h)."""
    n = state.config.n
    j = int(state.rng.integers(n))
    bit = 1 << j
    on, off = state.config.bits | bit, state.config.bits & ~bit
    h_on, h_off = h(on), h(off)
    p = float(expit(-beta * (h_on - h_off)))
    state.t += 1
    if state.rng.random() < p:
        state._moved_to(on, h_on)
    else:
        state._moved_to(off, h_off)
    return state


def gibbs_step(state: ChainState, model: GaussianModel, lam: float, beta: float,
               cache: Optional[CostCache] = None) -> ChainState:
    if beta <= 0:
        raise SpecError(f"beta must be positive, got {beta}")
    model.check(state.config)
    cache = as_cache(model, cache)
    return site_update(state, lambda bits: cache.cost(bits, lam), beta)


def _run(state: ChainState, steps: int, stride: int, beta_at: Callable[[int], float], lam: float,
         h: CostOf, patience: Optional[int], count_visits: bool) -> GibbsTrace:
    n = state.config.n
    trace = GibbsTrace(n=n, stride=stride)
    if count_visits:
        trace.visits = np.zeros(1 << n, dtype=np.int64)
    for _ in range(steps):
        beta = beta_at(state.t)
        site_update(state, h, beta)
        if trace.visits is not None:
            trace.visits[state.config.bits] += 1
        if state.t % stride == 0:
            trace.record(state, beta, lam)
        if patience is not None and state.t - state.last_improvement >= patience:
            trace.stopped_early = True
            break
    return trace


def _check_run_args(steps: int, stride: int, patience: Optional[int]) -> None:
    if steps < 1:
        raise SpecError(f"steps must be >= 1, got {steps}")
    if stride < 1:
        raise SpecError(f"stride must be >= 1, got {stride}")
    if patience is not None and patience < 1:
        raise SpecError(f"patience must be >= 1, got {patience}")


def run_basic_gibbs(model: GaussianModel, lam: float, beta: float, steps: int, seed: int,
                    stride: int = 1, patience: Optional[int] = None, cache: Optional[CostCache] = None,
                    initial: Optional[Configuration] = None,
                    count_visits: bool = False) -> Tuple[GibbsTrace, ChainState]:
    """
    Fixed-beta chain. `patience` stops after that many steps without a new
    best_seen; it is a heuristic, the chain itself has no stopping rule.
    """
    _check_run_args(steps, stride, patience)
    if beta <= 0:
        raise SpecError(f"beta must be > 0, got {beta}")
    cache = as_cache(model, cache)
    h = lambda bits: cache.cost(bits, lam)
    state = init_chain(model.n, h, seed, initial)
    logger.debug(f"basic gibbs: N={model.n} lambda={lam} beta={beta} steps={steps} seed={seed}")
    trace = _run(state, steps, stride, lambda t: beta, lam, h, patience, count_visits)
    logger.log_structured("INFO", {
        "event": "gibbs_finished", "algorithm": "basic", "n": model.n, "steps": state.t,
        "seed": seed, "best_cost": state.best_cost, "final_cost": state.cost,
    })
    return trace, state


def run_modified_gibbs(model: GaussianModel, lam: float, schedule: BetaSchedule, steps: int, seed: int,
                       stride: int = 1, patience: Optional[int] = None, cache: Optional[CostCache] = None,
                       initial: Optional[Configuration] = None,
                       count_visits: bool = False) -> Tuple[GibbsTrace, ChainState]:
    """Annealed chain: beta(t) from a logarithmic schedule validated against the model."""
    _check_run_args(steps, stride, patience)
    if schedule.kind != "logarithmic":
        raise ConfigurationError("the annealed sampler needs a logarithmic schedule")
    if schedule.n != model.n:
        raise ConfigurationError(f"schedule was built for N = {schedule.n}, model has N = {model.n}")
    cache = as_cache(model, cache)
    h = lambda bits: cache.cost(bits, lam)
    state = init_chain(model.n, h, seed, initial)
    logger.debug(f"modified gibbs: N={model.n} lambda={lam} beta0={schedule.beta0} steps={steps} seed={seed}")
    trace = _run(state, steps, stride, schedule.beta_at, lam, h, patience, count_visits)
    logger.log_structured("INFO", {
        "event": "gibbs_finished", "algorithm": "modified", "n": model.n, "steps": state.t,
        "seed": seed, "best_cost": state.best_cost, "final_cost": state.cost,
    })
    return trace, state


def swap_update(state: ChainState, err: CostOf, beta: float) -> ChainState:
    """
    Pick one active and one inactive sensor uniformly and resample which of
    the two is on from the two-point conditional. |B|_1 is preserved.
    """
    config = state.config
    state.t += 1
    if config.popcount in (0, config.n):
        return state
    active, inactive = config.active(), config.inactive()
    i = active[int(state.rng.integers(len(active)))]
    k = inactive[int(state.rng.integers(len(inactive)))]
    swapped = config.bits ^ (1 << i) ^ (1 << k)
    h_swapped = err(swapped)
    p = float(expit(-beta * (h_swapped - state.cost)))
    if state.rng.random() < p:
        state._moved_to(swapped, h_swapped)
    return state


def run_fixed_cardinality_gibbs(model: GaussianModel, nbar: int, beta: float, steps: int, seed: int,
                                stride: int = 1, patience: Optional[int] = None,
                                cache: Optional[CostCache] = None, debug: bool = False,
                                count_visits: bool = False) -> Tuple[GibbsTrace, ChainState]:
    """Chain on {B : |B|_1 = nbar} with h = E d_B, started uniformly on the slice."""
    _check_run_args(steps, stride, patience)
    n = model.n
    if not 0 <= nbar <= n:
        raise SpecError(f"nbar must lie in [0, {n}], got {nbar}")
    if beta <= 0:
        raise SpecError(f"beta must be > 0, got {beta}")
    cache = as_cache(model, cache)
    rng = np.random.default_rng(seed)
    start = Configuration.from_indices(rng.choice(n, size=nbar, replace=False).tolist(), n)
    value = cache.error(start.bits)
    state = ChainState(config=start, rng=rng, cost=value, best_config=start, best_cost=value)

    trace = GibbsTrace(n=n, stride=stride)
    if count_visits:
        trace.visits = np.zeros(1 << n, dtype=np.int64)
    for _ in range(steps):
        swap_update(state, cache.error, beta)
        if debug and state.config.popcount != nbar:
            raise ChainInvariantError(f"popcount {state.config.popcount} != {nbar} at t = {state.t}")
        if trace.visits is not None:
            trace.visits[state.config.bits] += 1
        if state.t % stride == 0:
            trace.record(state, beta, 0.0)
        if patience is not None and state.t - state.last_improvement >= patience:
            trace.stopped_early = True
            break
    logger.log_structured("INFO", {
        "event": "gibbs_finished", "algorithm": "fixed_cardinality", "n": n, "nbar": nbar,
        "steps": state.t, "seed": seed, "best_error": state.best_cost,
    })
    return trace, state


def slice_argmin_by_gibbs(model: GaussianModel, nbar: int, seed: int, cache: Optional[CostCache] = None,
                          beta: float = 50.0, steps: Optional[int] = None) -> Configuration:
    """Best configuration seen by a fixed-cardinality chain; used when the slice is too big to list."""
    steps = steps if steps is not None else max(2000, 200 * model.n)
    _, state = run_fixed_cardinality_gibbs(model, nbar, beta, steps, seed, cache=cache)
    return state.best_config

