import numpy as np
import pytest
from pydantic import ValidationError

from src.core.exceptions import DimensionMismatchError, NumericalDegeneracyError, SpecError
from src.services.gaussian_model import (
    Configuration,
    CostCache,
    CostParams,
    GaussianModel,
    cost,
    cost_cached,
    gaussian_mmse,
    make_params,
    mmse,
    popcounts,
)
from tests.conftest import well_conditioned


def test_configuration_bits_and_indices():
    config = Configuration.from_indices([0, 2, 5], 6)
    assert config.bits == 0b100101
    assert config.popcount == 3
    assert config.active() == (0, 2, 5)
    assert config.inactive() == (1, 3, 4)
    assert config.flip(2).active() == (0, 5)
    assert config.with_bit(1, True).popcount == 4
    assert config.hamming(Configuration.empty(6)) == 3
    assert Configuration.from_hex(config.to_hex(), 6) == config
    np.testing.assert_array_equal(config.to_array(), [1, 0, 1, 0, 0, 1])


def test_configuration_rejects_bits_outside_n():
    with pytest.raises(SpecError):
        Configuration(0b1000, 3)
    with pytest.raises(SpecError):
        Configuration.from_indices([4], 4)


def test_popcounts_table():
    np.testing.assert_array_equal(popcounts(3), [0, 1, 1, 2, 1, 2, 2, 3])


def test_model_validation():
    with pytest.raises(SpecError):
        GaussianModel(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(SpecError):
        GaussianModel(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(SpecError):
        GaussianModel(np.ones((2, 3)))
    with pytest.raises(SpecError):
        GaussianModel(np.array([[np.nan]]))


def test_model_is_read_only(model6):
    with pytest.raises(ValueError):
        model6.covariance[0, 0] = 1.0


def test_mmse_endpoints(model6):
    assert mmse(model6, Configuration.empty(6)) == pytest.approx(model6.trace)
    assert mmse(model6, Configuration.full(6)) == 0.0


def test_mmse_identity_counts_unobserved(identity6):
    for bits in range(64):
        assert gaussian_mmse(identity6, bits) == pytest.approx(6 - bits.bit_count())


@pytest.mark.parametrize("seed", range(5))
def test_mmse_matches_precision_route(seed):
    model = well_conditioned(7, seed)
    precision = np.linalg.inv(model.covariance)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        bits = int(rng.integers(1, (1 << 7) - 1))
        c = [k for k in range(7) if not bits >> k & 1]
        expected = np.trace(np.linalg.inv(precision[np.ix_(c, c)]))
        assert gaussian_mmse(model, bits) == pytest.approx(expected, rel=1e-8, abs=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_mmse_matches_monte_carlo_residual(seed):
    n = 6
    model = well_conditioned(n, 100 + seed)
    rng = np.random.default_rng(seed)
    bits = int(rng.integers(1, (1 << n) - 1))
    s = [k for k in range(n) if bits >> k & 1]
    c = [k for k in range(n) if not bits >> k & 1]
    m = model.covariance
    gain = m[np.ix_(c, s)] @ np.linalg.inv(m[np.ix_(s, s)])
    x = rng.multivariate_normal(np.zeros(n), m, size=200_000)
    residual = np.sum((x[:, c] - x[:, s] @ gain.T) ** 2, axis=1)
    stderr = residual.std(ddof=1) / np.sqrt(residual.size)
    assert abs(residual.mean() - gaussian_mmse(model, bits)) <= 4.5 * stderr


def test_singular_block_is_absorbed_by_jitter(rank_one):
    assert 0.0 <= gaussian_mmse(rank_one, 0b011) < 1e-6


def test_singular_block_raises_when_jitter_runs_out(rank_one, no_jitter):
    with pytest.raises(NumericalDegeneracyError) as info:
        gaussian_mmse(rank_one, 0b011)
    assert info.value.indices == (0, 1)
    assert info.value.exit_code == 3


def test_cost_adds_activation_price(model6):
    config = Configuration.from_indices([1, 3], 6)
    params = make_params(1.5)
    assert cost(model6, params, config) == pytest.approx(mmse(model6, config) + 3.0)


def test_cost_rejects_wrong_dimension(model6):
    with pytest.raises(DimensionMismatchError):
        mmse(model6, Configuration.empty(4))


def test_cost_params_alias_and_bounds():
    assert CostParams(**{"lambda": 2.0}).lam == 2.0
    with pytest.raises(ValidationError):
        CostParams(lam=-1.0)
    with pytest.raises(ValidationError):
        CostParams(lam=1.0, beta=0.0)


def test_cache_reuses_errors_across_lambda(model6):
    cache = CostCache(model6)
    config = Configuration.from_indices([0, 4], 6)
    low = cost_cached(cache, model6, make_params(0.5), config)
    high = cost_cached(cache, model6, make_params(2.5), config)
    assert high - low == pytest.approx(2 * 2.0)
    assert cache.misses == 1
    assert len(cache) == 1


def test_cache_is_bound_to_its_model(model6, identity6):
    cache = CostCache(identity6)
    with pytest.raises(SpecError):
        cost_cached(cache, model6, make_params(1.0), Configuration.empty(6))


def test_scalar_conditioning_example():
    model = GaussianModel(np.array([[1.0, 0.5], [0.5, 1.0]]))
    assert mmse(model, Configuration.from_indices([0], 2)) == pytest.approx(0.75, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_mmse_never_rises_when_sensors_are_added(seed):
    n = 8
    model = well_conditioned(n, 40 + seed)
    errors = [gaussian_mmse(model, bits) for bits in range(1 << n)]
    for outer in range(1 << n):
        inner = outer
        while True:
            assert errors[inner] >= errors[outer] - 1e-10
            if inner == 0:
                break
            inner = (inner - 1) & outer


@pytest.mark.parametrize("seed", range(4))
def test_mmse_is_invariant_under_relabelling(seed):
    n = 7
    model = well_conditioned(n, 50 + seed)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    relabelled = GaussianModel(model.covariance[np.ix_(perm, perm)])
    for _ in range(20):
        bits = int(rng.integers(0, 1 << n))
        original = sum(1 << int(perm[i]) for i in range(n) if bits >> i & 1)
        assert gaussian_mmse(relabelled, bits) == pytest.approx(gaussian_mmse(model, original), rel=1e-9, abs=1e-12)
