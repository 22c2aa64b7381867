"""
Deterministic comparison heuristics: a single serial pass for the
unconstrained cost, and best-first addition up to a cardinality budget.
Neither carries an approximation guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

from src.core.exceptions import SpecError
from src.core.logger import get_logger
from src.services.gaussian_model import Configuration, CostCache, GaussianModel, as_cache

logger = get_logger(__name__)


@dataclass
class GreedyResult:
    config: Configuration
    value: float
    order: List[int] = field(default_factory=list)
    filled_with_nonimproving: bool = False

    def to_dict(self) -> dict:
        return {
            "bits_hex": self.config.to_hex(),
            "active": list(self.config.active()),
            "cost_or_error": self.value,
            "order": self.order,
            "filled_with_nonimproving": self.filled_with_nonimproving,
        }


def greedy_unconstrained(model: GaussianModel, lam: float,
                         cache: Optional[CostCache] = None) -> GreedyResult:
    """
    One pass over sensors 0..N-1: keep sensor k iff adding it strictly lowers
    h. A tie leaves it out.
    """
    if lam < 0:
        raise SpecError(f"lambda must be >= 0, got {lam}")
    cache = as_cache(model, cache)
    bits = 0
    current = cache.cost(bits, lam)
    order = []
    for k in range(model.n):
        candidate = bits | (1 << k)
        value = cache.cost(candidate, lam)
        if value < current:
            bits, current = candidate, value
            order.append(k)
    logger.debug(f"greedy: N={model.n} lambda={lam} kept {order} cost={current:.6g}")
    return GreedyResult(Configuration(bits, model.n), current, order)


def best_addition(error: Callable[[int], float], bits: int, n: int) -> Tuple[int, float]:
    """Inactive sensor whose addition gives the lowest error; lowest index on ties."""
    best_k, best_value = -1, float("inf")
    for k in range(n):
        if bits >> k & 1:
            continue
        value = error(bits | (1 << k))
        if value < best_value:
            best_k, best_value = k, value
    if best_k < 0:
        raise SpecError("every sensor is already active")
    return best_k, best_value


def newgreedy_cardinality(model: GaussianModel, nbar: int,
                          cache: Optional[CostCache] = None) -> GreedyResult:
    """
    Best-first: each round adds the sensor giving the lowest error, lowest
    index on ties. A round whose best candidate does not strictly lower the
    error still adds it, and the result is flagged.
    """
    n = model.n
    if not 0 <= nbar <= n:
        raise SpecError(f"nbar must lie in [0, {n}], got {nbar}")
    cache = as_cache(model, cache)
    bits = 0
    current = cache.error(bits)
    order: List[int] = []
    flagged = False
    for _ in range(nbar):
        best_k, best_value = best_addition(cache.error, bits, n)
        if not best_value < current:
            flagged = True
            logger.info(f"newgreedy: adding sensor {best_k} without improvement ({best_value:.6g} >= {current:.6g})")
        bits |= 1 << best_k
        current = best_value
        order.append(best_k)
    return GreedyResult(Configuration(bits, n), current, order, flagged)
