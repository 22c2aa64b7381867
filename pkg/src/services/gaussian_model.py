"""
Configurations, the Gaussian error model and the network cost

    h(B) = E d_B + lambda * |B|_1

with E d_B the MMSE of estimating the unselected coordinates from the
selected ones: tr(M(C,C) - M(C,S) M(S,S)^-1 M(S,C)), C the complement of S.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from src.core.config import settings
from src.core.exceptions import DimensionMismatchError, NumericalDegeneracyError, SpecError
from src.core.logger import get_logger

logger = get_logger(__name__)

SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-9


@dataclass(frozen=True)
class Configuration:
    """Activation mask over n sensors; bit k set means sensor k is active."""

    bits: int
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise SpecError(f"configuration needs n >= 1, got {self.n}")
        if self.bits < 0 or self.bits >> self.n:
            raise SpecError(f"bits 0x{self.bits:x} do not fit in n = {self.n} sensors")

    @classmethod
    def empty(cls, n: int) -> Configuration:
        return cls(0, n)

    @classmethod
    def full(cls, n: int) -> Configuration:
        return cls((1 << n) - 1, n)

    @classmethod
    def from_indices(cls, indices: Iterable[int], n: int) -> Configuration:
        bits = 0
        for k in indices:
            if not 0 <= k < n:
                raise SpecError(f"sensor index {k} out of range for n = {n}")
            bits |= 1 << k
        return cls(bits, n)

    @classmethod
    def from_array(cls, mask: Sequence[int] | np.ndarray) -> Configuration:
        return cls.from_indices(np.flatnonzero(np.asarray(mask)).tolist(), len(mask))

    @classmethod
    def from_hex(cls, text: str, n: int) -> Configuration:
        return cls(int(text, 16), n)

    @property
    def popcount(self) -> int:
        return self.bits.bit_count()

    def active(self) -> Tuple[int, ...]:
        return active_indices(self.bits, self.n)

    def inactive(self) -> Tuple[int, ...]:
        return active_indices(~self.bits & ((1 << self.n) - 1), self.n)

    def flip(self, j: int) -> Configuration:
        return Configuration(self.bits ^ (1 << j), self.n)

    def with_bit(self, j: int, value: bool) -> Configuration:
        bits = self.bits | (1 << j) if value else self.bits & ~(1 << j)
        return Configuration(bits, self.n)

    def hamming(self, other: Configuration) -> int:
        return (self.bits ^ other.bits).bit_count()

    def to_array(self) -> np.ndarray:
        return np.array([(self.bits >> k) & 1 for k in range(self.n)], dtype=np.int8)

    def to_hex(self) -> str:
        return f"{self.bits:x}"

    def __str__(self):
        return f"Configuration(0x{self.bits:x}, n={self.n}, active={list(self.active())})"


def active_indices(bits: int, n: int) -> Tuple[int, ...]:
    return tuple(k for k in range(n) if bits >> k & 1)


def popcounts(n: int) -> np.ndarray:
    """|B|_1 for every bitmask 0 .. 2^n - 1."""
    counts = np.zeros(1 << n, dtype=np.int64)
    for k in range(n):
        counts[1 << k:1 << (k + 1)] = counts[:1 << k] + 1
    return counts


@dataclass(frozen=True, eq=False)
class GaussianModel:
    """Covariance of the jointly Gaussian sensor data. Symmetrized on construction."""

    covariance: np.ndarray
    jitter: float = 0.0

    def __post_init__(self):
        m = np.array(self.covariance, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
            raise SpecError(f"covariance must be a non-empty square matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise SpecError("covariance has non-finite entries")
        scale = max(1.0, float(np.max(np.abs(m))))
        if np.max(np.abs(m - m.T)) > SYMMETRY_TOL * scale:
            raise SpecError("covariance is not symmetric")
        m = 0.5 * (m + m.T)
        min_eig = float(np.linalg.eigvalsh(m)[0])
        if min_eig < -PSD_TOL * scale:
            raise SpecError(f"covariance is not positive semidefinite (min eigenvalue {min_eig:.3g})")
        if self.jitter < 0:
            raise SpecError(f"jitter must be nonnegative, got {self.jitter}")
        m.setflags(write=False)
        object.__setattr__(self, "covariance", m)

    @property
    def n(self) -> int:
        return self.covariance.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.covariance))

    def check(self, config: Configuration) -> None:
        if config.n != self.n:
            raise DimensionMismatchError(f"configuration has n = {config.n}, model has N = {self.n}")


class CostParams(BaseModel):
    """Activation price and (fixed) inverse temperature."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: float = Field(ge=0.0, alias="lambda")
    beta: float = Field(default=1.0, gt=0.0)


def make_params(lam: float, beta: float = 1.0) -> CostParams:
    return CostParams(lam=lam, beta=beta)


def factor_spd(matrix: np.ndarray, base_jitter: float = 0.0):
    """
    Cholesky factor of a symmetric PSD block, escalating the diagonal jitter
    from MMSE_JITTER_START by MMSE_JITTER_FACTOR up to MMSE_JITTER_MAX.
    Returns (factor, jitter used); raises LinAlgError when the ladder runs out.
    """
    eye = np.eye(matrix.shape[0])
    try:
        return cho_factor(matrix + base_jitter * eye, lower=True, check_finite=False), base_jitter
    except LinAlgError:
        pass
    jitter = max(settings.MMSE_JITTER_START, base_jitter)
    while jitter <= settings.MMSE_JITTER_MAX * (1 + 1e-12):
        try:
            return cho_factor(matrix + jitter * eye, lower=True, check_finite=False), jitter
        except LinAlgError:
            jitter *= settings.MMSE_JITTER_FACTOR
    raise LinAlgError(f"not positive definite up to jitter {settings.MMSE_JITTER_MAX:g}")


def gaussian_mmse(model: GaussianModel, bits: int) -> float:
    n = model.n
    if bits == 0:
        return model.trace
    if bits == (1 << n) - 1:
        return 0.0
    s = list(active_indices(bits, n))
    c = [k for k in range(n) if not bits >> k & 1]
    m = model.covariance
    m_ss = m[np.ix_(s, s)]
    m_sc = m[np.ix_(s, c)]
    try:
        factor, jitter = factor_spd(m_ss, model.jitter)
    except LinAlgError:
        logger.error(f"M(S,S) singular for S = {s}")
        raise NumericalDegeneracyError(bits, s, settings.MMSE_JITTER_MAX)
    if jitter > model.jitter:
        logger.warning(f"jitter {jitter:g} needed to factor M(S,S) for S = {s}")
    gain = cho_solve(factor, m_sc, check_finite=False)
    value = float(np.trace(m[np.ix_(c, c)]) - np.sum(m_sc * gain))
    return max(value, 0.0)


class ErrorMetric(Protocol):
    """Pluggable E d_B: maps (model, bitmask) to a nonnegative expected error."""

    def __call__(self, model: GaussianModel, bits: int) -> float: ...


def mmse(model: GaussianModel, config: Configuration) -> float:
    model.check(config)
    return gaussian_mmse(model, config.bits)


def cost(model: GaussianModel, params: CostParams, config: Configuration,
         metric: ErrorMetric = gaussian_mmse) -> float:
    model.check(config)
    return metric(model, config.bits) + params.lam * config.popcount


@dataclass
class CostCache:
    """
    Memoized error terms keyed by bitmask for one model. The activation term
    is recomputed on every lookup, so entries stay valid when lambda moves.
    Reads and inserts are guarded by a lock; share freely across threads.
    """

    model: GaussianModel
    metric: ErrorMetric = gaussian_mmse
    _errors: Dict[int, float] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    misses: int = 0

    def error(self, bits: int) -> float:
        value = self._errors.get(bits)
        if value is not None:
            return value
        value = self.metric(self.model, bits)
        with self._lock:
            if bits not in self._errors:
                self._errors[bits] = value
                self.misses += 1
            return self._errors[bits]

    def cost(self, bits: int, lam: float) -> float:
        return self.error(bits) + lam * bits.bit_count()

    def __len__(self):
        return len(self._errors)


def cost_cached(cache: CostCache, model: GaussianModel, params: CostParams, config: Configuration) -> float:
    if cache.model is not model:
        raise SpecError("cost cache belongs to a different model")
    model.check(config)
    return cache.cost(config.bits, params.lam)


def as_cache(model: GaussianModel, cache: Optional[CostCache] = None) -> CostCache:
    if cache is None:
        return CostCache(model)
    if cache.model is not model:
        raise SpecError("cost cache belongs to a different model")
    return cache
