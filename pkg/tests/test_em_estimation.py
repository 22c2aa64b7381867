import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from src.core.exceptions import SpecError
from src.services.baselines import newgreedy_cardinality
from src.services.em_estimation import (
    CommonMeanFamily,
    EMMonotonicityError,
    GaussianSource,
    ObservationPool,
    PartialObservation,
    SequentialSelection,
    em_fit,
    em_sequential_select,
    em_static_select,
    run_em,
    slice_argmin,
)
from src.services.exact_oracle import exhaustive_constrained_optimum
from src.services.gaussian_model import Configuration, GaussianModel
from src.services.harness import gen_covariance
from tests.conftest import well_conditioned


def _random_pool(model: GaussianModel, theta: float, size: int, seed: int) -> ObservationPool:
    source = GaussianSource(model, theta, seed)
    rng = np.random.default_rng(seed)
    pool = ObservationPool(model.n)
    full = (1 << model.n) - 1
    for _ in range(size):
        bits = int(rng.integers(1, full + 1))
        pool.add(PartialObservation.from_full(source.draw(), Configuration(bits, model.n)))
    return pool


def test_partial_observation_validation():
    observed = Configuration.from_indices([0, 2], 4)
    with pytest.raises(SpecError):
        PartialObservation(observed, np.array([1.0]))
    with pytest.raises(SpecError):
        PartialObservation(Configuration.empty(4), np.array([]))
    with pytest.raises(SpecError):
        PartialObservation(observed, np.array([1.0, np.inf]))
    obs = PartialObservation.from_full(np.array([1.0, 2.0, 3.0, 4.0]), observed)
    np.testing.assert_array_equal(obs.values, [1.0, 3.0])


def test_pool_groups_by_observed_set():
    observed = Configuration.from_indices([1], 3)
    pool = ObservationPool(3)
    pool.add(PartialObservation(observed, [2.0]))
    pool.add(PartialObservation(observed, [4.0]))
    pool.add(PartialObservation(Configuration.full(3), [1.0, 1.0, 1.0]))
    assert pool.size == 3
    assert len(pool.groups) == 2
    group = pool.groups[observed.bits]
    assert group.count == 2
    np.testing.assert_allclose(group.total, [6.0])
    np.testing.assert_allclose(group.second_moment, [[20.0]])
    with pytest.raises(SpecError):
        pool.add(PartialObservation(Configuration.full(2), [1.0, 1.0]))


def test_selection_criterion_ignores_theta(model6):
    family = CommonMeanFamily(model6)
    shifted = family.with_theta(5.0)
    for bits in [0, 0b101, 0b111000, 0b111111]:
        assert shifted.expected_error(bits) == family.expected_error(bits)
    assert family.theta == 0.0
    assert shifted.theta == 5.0


def test_family_rejects_non_finite_theta(model6):
    with pytest.raises(SpecError):
        CommonMeanFamily(model6, math.nan)


@pytest.mark.parametrize("seed", range(3))
def test_em_is_monotone_and_reaches_the_observed_mle(seed):
    model = well_conditioned(5, 60 + seed)
    pool = _random_pool(model, 1.3, 40, seed)
    family = CommonMeanFamily(model, -2.0)
    result = run_em(family, pool, max_iters=5000, tol=1e-10)
    assert result.converged
    assert all(b >= a - 1e-9 * max(1.0, abs(a)) for a, b in zip(result.loglik, result.loglik[1:]))
    assert result.family.theta == pytest.approx(family.observed_mle(pool), abs=1e-8)
    assert len(result.thetas) == result.iterations + 1


def test_em_matches_direct_likelihood_maximization():
    model = well_conditioned(4, 70)
    source = GaussianSource(model, -0.7, 5)
    pool = ObservationPool(4)
    for _ in range(25):
        pool.add(PartialObservation.from_full(source.draw(), Configuration.from_indices([0, 3], 4)))
    family = CommonMeanFamily(model, 3.0)
    fitted = run_em(family, pool, max_iters=5000, tol=1e-10).family
    direct = minimize_scalar(
        lambda theta: -family.with_theta(theta).observed_loglik(pool),
        bracket=(-5.0, 5.0), method="golden", tol=1e-10,
    )
    assert fitted.theta == pytest.approx(direct.x, abs=1e-5)


def test_full_observation_gives_generalized_least_squares_mean(model6):
    x = np.array([0.3, -1.2, 2.0, 0.7, 1.1, -0.4])
    obs = PartialObservation(Configuration.full(6), x)
    fitted = em_fit(CommonMeanFamily(model6, 10.0), obs)
    weights = np.linalg.solve(model6.covariance, np.ones(6))
    assert fitted.theta == pytest.approx(weights @ x / weights.sum(), rel=1e-9)


def test_em_detects_likelihood_drop(model6):
    class Broken(CommonMeanFamily):
        def m_step(self, completed_sum, count):
            return self.theta_ + 10.0

    pool = _random_pool(model6, 0.0, 10, 1)
    with pytest.raises(EMMonotonicityError):
        run_em(Broken(model6), pool, max_iters=5)


def test_em_argument_checks(model6):
    with pytest.raises(SpecError):
        run_em(CommonMeanFamily(model6), ObservationPool(6))
    with pytest.raises(SpecError):
        run_em(CommonMeanFamily(model6), _random_pool(model6, 0.0, 3, 0), max_iters=0)


def test_reconstruction_on_identity_fills_theta(identity6):
    family = CommonMeanFamily(identity6, 0.8)
    obs = PartialObservation(Configuration.from_indices([1, 4], 6), [3.0, -2.0])
    np.testing.assert_allclose(family.reconstruct(obs), [0.8, 3.0, 0.8, 0.8, -2.0, 0.8])


def test_static_selection_follows_best_first_order(model6):
    oracle, x = GaussianSource(model6, 1.0, 8).static_oracle()
    selection = em_static_select(CommonMeanFamily(model6), oracle, 3, tol=1e-10)
    assert selection.order == newgreedy_cardinality(model6, 3).order
    assert len(selection.theta_trace) == 4
    np.testing.assert_allclose(selection.reconstruction[selection.order], x[selection.order])
    assert set(selection.to_dict()) == {"order", "theta", "theta_trace", "reconstruction", "converged"}
    assert selection.converged


def test_static_selection_with_every_sensor_recovers_the_realization(model6):
    oracle, x = GaussianSource(model6, -0.5, 9).static_oracle()
    selection = em_static_select(CommonMeanFamily(model6), oracle, 6)
    assert sorted(selection.order) == list(range(6))
    np.testing.assert_allclose(selection.reconstruction, x)


def test_static_selection_bounds(model6):
    oracle, _ = GaussianSource(model6, 0.0, 0).static_oracle()
    with pytest.raises(SpecError):
        em_static_select(CommonMeanFamily(model6), oracle, 0)
    with pytest.raises(SpecError):
        em_static_select(CommonMeanFamily(model6), oracle, 7)


def test_slice_argmin_enumerates_small_slices(model6):
    family = CommonMeanFamily(model6)
    config, _ = exhaustive_constrained_optimum(model6, 2)
    assert slice_argmin(family, model6, 2, seed=0) == config


def test_sequential_selection_estimates_theta():
    model = well_conditioned(5, 80)
    theta, nbar, slots = 1.5, 2, 200
    source = GaussianSource(model, theta, 12)
    result = em_sequential_select(CommonMeanFamily(model), source.snapshot_stream(), nbar, slots, tol=1e-10)
    best, _ = exhaustive_constrained_optimum(model, nbar)
    assert all(config == best for config in result.selections)
    assert len(result.theta_trace) == slots + 1

    s = list(best.active())
    weights = np.linalg.solve(model.covariance[np.ix_(s, s)], np.ones(nbar))
    stderr = 1.0 / math.sqrt(slots * weights.sum())
    assert abs(result.theta_trace[-1] - theta) <= 5 * stderr

    rows = result.rows()
    assert len(rows) == slots
    assert tuple(rows[0]) == SequentialSelection.COLUMNS
    assert rows[0]["popcount"] == nbar


def test_sequential_selection_bounds(model6):
    stream = GaussianSource(model6, 0.0, 0).snapshot_stream()
    with pytest.raises(SpecError):
        em_sequential_select(CommonMeanFamily(model6), stream, 2, 0)
    with pytest.raises(SpecError):
        em_sequential_select(CommonMeanFamily(model6), stream, 0, 3)


def test_sources_are_seeded(model6):
    a = GaussianSource(model6, 0.0, 4).draw()
    b = GaussianSource(model6, 0.0, 4).draw()
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(6))
def test_single_observed_coordinate_reaches_the_direct_mle(seed):
    model = gen_covariance(4, seed)
    x = GaussianSource(model, 0.6, 40 + seed).draw()
    obs = PartialObservation.from_full(x, Configuration.from_indices([0], 4))
    pool = ObservationPool(4)
    pool.add(obs)
    family = CommonMeanFamily(model, 0.0)

    result = run_em(family, pool)
    assert result.converged
    assert result.iterations < 20
    assert result.family.theta == pytest.approx(x[0], abs=1e-6)
    assert em_fit(family, obs).theta == pytest.approx(x[0], abs=1e-6)

    direct = minimize_scalar(
        lambda theta: -family.with_theta(theta).observed_loglik(pool),
        bracket=(x[0] - 5.0, x[0] + 5.0), method="golden", tol=1e-12,
    )
    assert result.family.theta == pytest.approx(direct.x, abs=1e-6)


@pytest.mark.parametrize("seed", [2, 3])
def test_static_selection_of_one_sensor_matches_its_reading(seed):
    model = gen_covariance(4, seed)
    oracle, x = GaussianSource(model, 1.0, seed).static_oracle()
    selection = em_static_select(CommonMeanFamily(model, 0.0), oracle, 1)
    assert selection.converged
    assert selection.family.theta == pytest.approx(x[selection.order[0]], abs=1e-6)


def test_em_fit_output_is_a_fixed_point():
    model = gen_covariance(5, 11)
    x = GaussianSource(model, -1.0, 11).draw()
    obs = PartialObservation.from_full(x, Configuration.from_indices([1, 3], 5))
    fitted = em_fit(CommonMeanFamily(model, 4.0), obs)
    again = em_fit(fitted, obs)
    assert abs(again.theta - fitted.theta) <= 1e-8


def test_em_reports_an_exhausted_budget():
    model = gen_covariance(4, 2)
    x = GaussianSource(model, 0.6, 42).draw()
    pool = ObservationPool(4)
    pool.add(PartialObservation.from_full(x, Configuration.from_indices([0], 4)))
    result = run_em(CommonMeanFamily(model, 0.0), pool, max_iters=1)
    assert not result.converged
    assert result.iterations == 1


@pytest.mark.slow
def test_sequential_estimates_concentrate_as_slots_grow():
    model = well_conditioned(5, 90)
    theta, nbar = 0.8, 2
    errors = {10: [], 100: [], 1000: []}
    for seed in range(50):
        source = GaussianSource(model, theta, 500 + seed)
        result = em_sequential_select(CommonMeanFamily(model), source.snapshot_stream(), nbar, 1000)
        assert result.converged
        for t in errors:
            errors[t].append(abs(result.theta_trace[t] - theta))
    medians = [float(np.median(errors[t])) for t in sorted(errors)]
    assert medians[0] > medians[1] > medians[2]
