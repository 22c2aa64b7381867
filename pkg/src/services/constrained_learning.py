"""
Gibbs sampling coupled with a projected stochastic-approximation update of
the activation price so that the stationary mean active count meets nbar:

    lambda(t+1) = clamp(lambda(t) + a(t) * (|B(t-1)|_1 - nbar), b, c),  a(t) = step0 / t

The chain runs on the fast timescale, lambda on the slow one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import bisect

from src.core.config import settings
from src.core.exceptions import CapacityError, SpecError
from src.core.logger import get_logger
from src.services.exact_oracle import enumerate_errors, exact_gibbs_from_costs
from src.services.gaussian_model import CostCache, GaussianModel, as_cache, popcounts
from src.services.gibbs_samplers import ChainState, init_chain, site_update

logger = get_logger(__name__)

LAMBDA_TOL = 1e-6


class LearningParams(BaseModel):
    """
    Target and stepsize settings. `c` defaults to tr(M) and `lambda0` to the
    middle of [b, c]; `resolve` fills both in for a given model.
    """

    model_config = ConfigDict(frozen=True)

    nbar_target: float = Field(ge=0.0)
    beta: float = Field(default=5.0, gt=0.0)
    step0: float = Field(default=1.0, gt=0.0)
    b: float = Field(default=0.0, ge=0.0)
    c: Optional[float] = None
    lambda0: Optional[float] = None

    @model_validator(mode="after")
    def _check_box(self) -> LearningParams:
        if self.c is not None:
            if self.c <= self.b:
                raise ValueError(f"projection box needs c > b, got b = {self.b}, c = {self.c}")
            if self.lambda0 is not None and not self.b <= self.lambda0 <= self.c:
                raise ValueError(f"lambda0 = {self.lambda0} outside [{self.b}, {self.c}]")
        elif self.lambda0 is not None and self.lambda0 < self.b:
            raise ValueError(f"lambda0 = {self.lambda0} below b = {self.b}")
        return self

    def resolve(self, model: GaussianModel) -> LearningParams:
        if self.nbar_target > model.n:
            raise SpecError(f"nbar_target = {self.nbar_target} exceeds N = {model.n}")
        c = self.c if self.c is not None else max(model.trace, self.b + 1.0)
        lambda0 = self.lambda0 if self.lambda0 is not None else 0.5 * (self.b + c)
        return self.model_copy(update={"c": c, "lambda0": lambda0}).validated()

    def validated(self) -> LearningParams:
        return LearningParams.model_validate(self.model_dump())

    def stepsize(self, t: int) -> float:
        return self.step0 / t


@dataclass
class LearningState:
    chain: ChainState
    lam: float
    t: int = 0
    lambda_trace: List[Tuple[int, float, int]] = field(default_factory=list)
    lambda_hat: Optional[float] = None
    tail_mean_popcount: Optional[float] = None


@dataclass
class LearningTrace:
    t: List[int] = field(default_factory=list)
    lam: List[float] = field(default_factory=list)
    popcount: List[int] = field(default_factory=list)
    cost: List[float] = field(default_factory=list)

    COLUMNS = ("t", "lambda", "popcount", "cost")

    def rows(self) -> List[dict]:
        return [
            {"t": t, "lambda": l, "popcount": p, "cost": c}
            for t, l, p, c in zip(self.t, self.lam, self.popcount, self.cost)
        ]

    def lambdas(self) -> np.ndarray:
        return np.asarray(self.lam)


def learning_step(state: LearningState, model: GaussianModel, params: LearningParams,
                  cache: Optional[CostCache] = None) -> LearningState:
    """One site update under h_lambda(t), then the projected price update."""
    if params.c is None:
        raise SpecError("learning params must be resolved against the model first")
    cache = as_cache(model, cache)
    previous = state.chain.config.popcount
    lam = state.lam
    state.chain.cost = cache.cost(state.chain.config.bits, lam)
    site_update(state.chain, lambda bits: cache.cost(bits, lam), params.beta)
    state.t += 1
    innovation = previous - params.nbar_target
    state.lam = float(np.clip(lam + params.stepsize(state.t) * innovation, params.b, params.c))
    state.lambda_trace.append((state.t, state.lam, state.chain.config.popcount))
    return state


def default_tail_window(steps: int) -> int:
    return min(steps, max(100, steps // 20))


def run_gibbs_learning(model: GaussianModel, params: LearningParams, steps: int, seed: int,
                       tail_window: Optional[int] = None,
                       cache: Optional[CostCache] = None) -> Tuple[LearningTrace, LearningState]:
    """
    Returns the per-step trace and the final state; state.lambda_hat is the
    mean of lambda(t) over the last `tail_window` steps.
    """
    if steps < 1:
        raise SpecError(f"steps must be >= 1, got {steps}")
    params = params.resolve(model)
    window = default_tail_window(steps) if tail_window is None else min(max(tail_window, 1), steps)
    cache = as_cache(model, cache)
    lam0 = float(params.lambda0)  # type: ignore[arg-type]
    chain = init_chain(model.n, lambda bits: cache.cost(bits, lam0), seed)
    state = LearningState(chain=chain, lam=lam0)
    trace = LearningTrace()

    logger.debug(
        f"gibbs learning: N={model.n} nbar={params.nbar_target} beta={params.beta} "
        f"box=[{params.b}, {params.c}] lambda0={lam0} steps={steps} seed={seed}"
    )
    for _ in range(steps):
        learning_step(state, model, params, cache)
        trace.t.append(state.t)
        trace.lam.append(state.lam)
        trace.popcount.append(state.chain.config.popcount)
        trace.cost.append(state.chain.cost)

    state.lambda_hat = float(np.mean(trace.lam[-window:]))
    state.tail_mean_popcount = float(np.mean(trace.popcount[-window:]))
    logger.log_structured("INFO", {
        "event": "learning_finished", "n": model.n, "steps": steps, "seed": seed,
        "lambda_hat": state.lambda_hat, "tail_mean_popcount": state.tail_mean_popcount,
    })
    return trace, state


def expected_active_count(model: GaussianModel, beta: float, lam: float,
                          cache: Optional[CostCache] = None,
                          errors: Optional[np.ndarray] = None) -> float:
    """f(lambda) = E |B|_1 under pi_beta at price lambda, by enumeration."""
    if errors is None:
        errors = enumerate_errors(model, cache)
    counts = popcounts(model.n)
    return exact_gibbs_from_costs(errors + lam * counts, beta).expectation(counts)


def expected_error(model: GaussianModel, beta: float, lam: float,
                   errors: Optional[np.ndarray] = None) -> float:
    """E[E d_B] under pi_beta at price lambda."""
    if errors is None:
        errors = enumerate_errors(model)
    return exact_gibbs_from_costs(errors + lam * popcounts(model.n), beta).expectation(errors)


@dataclass
class Feasibility:
    feasible: bool
    lambda_star: Optional[float]
    f_b: float
    f_c: float


def check_feasibility(model: GaussianModel, beta: float, nbar_target: float, b: float, c: float,
                      cache: Optional[CostCache] = None) -> Feasibility:
    """
    nbar is attainable inside [b, c] iff f(c) <= nbar <= f(b) (f decreases in
    lambda); when it is, bisect for the root to 1e-6.
    """
    if model.n > settings.EXACT_GIBBS_CAP:
        raise CapacityError(model.n, settings.EXACT_GIBBS_CAP, "feasibility check")
    if c <= b:
        raise SpecError(f"need c > b, got b = {b}, c = {c}")
    errors = enumerate_errors(model, cache)

    def f(lam: float) -> float:
        return expected_active_count(model, beta, lam, errors=errors)

    f_b, f_c = f(b), f(c)
    if nbar_target == f_b:
        return Feasibility(True, b, f_b, f_c)
    if nbar_target == f_c:
        return Feasibility(True, c, f_b, f_c)
    if not f_c <= nbar_target <= f_b:
        logger.info(f"nbar = {nbar_target} infeasible on [{b}, {c}]: f(b) = {f_b:.6g}, f(c) = {f_c:.6g}")
        return Feasibility(False, None, f_b, f_c)
    root = bisect(lambda lam: f(lam) - nbar_target, b, c, xtol=LAMBDA_TOL / 4)
    return Feasibility(True, float(root), f_b, f_c)


def target_for_lambda(model: GaussianModel, beta: float, lam_star: float,
                      cache: Optional[CostCache] = None) -> float:
    """nbar := f(lambda*), the target whose root is lambda* by construction."""
    return expected_active_count(model, beta, lam_star, cache)
