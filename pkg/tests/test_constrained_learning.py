import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.exceptions import CapacityError, SpecError
from src.services.constrained_learning import (
    LearningParams,
    LearningState,
    check_feasibility,
    default_tail_window,
    expected_active_count,
    learning_step,
    run_gibbs_learning,
    target_for_lambda,
)
from src.services.gaussian_model import Configuration, CostCache, GaussianModel
from src.services.gibbs_samplers import init_chain
from src.services.harness import gen_covariance


def _state_at(model: GaussianModel, config: Configuration, lam: float) -> LearningState:
    cache = CostCache(model)
    chain = init_chain(model.n, lambda bits: cache.cost(bits, lam), seed=0, initial=config)
    return LearningState(chain=chain, lam=lam)


def test_params_validation(identity6):
    with pytest.raises(ValidationError):
        LearningParams(nbar_target=1.0, b=1.0, c=1.0)
    with pytest.raises(ValidationError):
        LearningParams(nbar_target=1.0, b=0.0, c=2.0, lambda0=3.0)
    with pytest.raises(ValidationError):
        LearningParams(nbar_target=-1.0)
    with pytest.raises(SpecError):
        LearningParams(nbar_target=7.0).resolve(identity6)


def test_resolve_fills_box_from_trace(identity6):
    params = LearningParams(nbar_target=2.0).resolve(identity6)
    assert params.c == pytest.approx(6.0)
    assert params.lambda0 == pytest.approx(3.0)
    assert params.stepsize(4) == pytest.approx(0.25)


def test_step_needs_resolved_params(identity6):
    state = _state_at(identity6, Configuration.empty(6), 1.0)
    with pytest.raises(SpecError):
        learning_step(state, identity6, LearningParams(nbar_target=2.0))


def test_zero_innovation_keeps_lambda(identity6):
    params = LearningParams(nbar_target=3.0, b=0.0, c=5.0).resolve(identity6)
    state = _state_at(identity6, Configuration.from_indices([0, 1, 2], 6), 1.7)
    learning_step(state, identity6, params)
    assert state.lam == 1.7
    assert state.t == 1


def test_update_uses_popcount_before_the_step(identity6):
    params = LearningParams(nbar_target=1.0, b=0.0, c=10.0, step0=0.5).resolve(identity6)
    state = _state_at(identity6, Configuration.from_indices([0, 1, 2, 3], 6), 2.0)
    learning_step(state, identity6, params)
    assert state.lam == pytest.approx(2.0 + 0.5 * 3)


def test_update_is_clamped_to_box(identity6):
    params = LearningParams(nbar_target=0.0, b=0.0, c=2.0).resolve(identity6)
    state = _state_at(identity6, Configuration.full(6), 1.9)
    learning_step(state, identity6, params)
    assert state.lam == 2.0


def test_lambda_never_leaves_box(model6):
    params = LearningParams(nbar_target=2.0, beta=3.0, b=0.5, c=3.0, lambda0=1.0, step0=4.0)
    trace, _ = run_gibbs_learning(model6, params, 3000, seed=2)
    lambdas = trace.lambdas()
    assert lambdas.min() >= 0.5
    assert lambdas.max() <= 3.0
    assert tuple(trace.rows()[0]) == trace.COLUMNS


def test_full_target_drives_lambda_to_floor(identity6):
    params = LearningParams(nbar_target=6.0, beta=1.0, b=0.0, c=2.0, lambda0=1.0, step0=5.0)
    trace, state = run_gibbs_learning(identity6, params, 2000, seed=3)
    lambdas = trace.lambdas()
    assert np.all(np.diff(lambdas) <= 0)
    assert state.lam == 0.0


def test_empty_target_pushes_lambda_up(identity6):
    params = LearningParams(nbar_target=0.0, beta=5.0, b=0.0, c=2.0, lambda0=0.0)
    trace, state = run_gibbs_learning(identity6, params, 2000, seed=4)
    assert np.all(np.diff(trace.lambdas()) >= 0)
    assert state.lam > 1.0


def test_tail_window():
    assert default_tail_window(50) == 50
    assert default_tail_window(1000) == 100
    assert default_tail_window(100_000) == 5000


def test_runs_are_reproducible(model6):
    params = LearningParams(nbar_target=2.0, beta=2.0)
    a, state_a = run_gibbs_learning(model6, params, 500, seed=9)
    b, state_b = run_gibbs_learning(model6, params, 500, seed=9)
    assert a.lam == b.lam
    assert state_a.lambda_hat == state_b.lambda_hat


def test_identity_root_has_closed_form(identity6):
    beta, nbar = 2.0, 2.5
    expected = 1.0 - math.log(nbar / (6 - nbar)) / beta
    result = check_feasibility(identity6, beta, nbar, 0.0, 6.0)
    assert result.feasible
    assert result.lambda_star == pytest.approx(expected, abs=1e-5)


def test_endpoint_targets_return_endpoints(identity6):
    f_b = expected_active_count(identity6, 2.0, 0.0)
    f_c = expected_active_count(identity6, 2.0, 6.0)
    assert check_feasibility(identity6, 2.0, f_b, 0.0, 6.0).lambda_star == 0.0
    assert check_feasibility(identity6, 2.0, f_c, 0.0, 6.0).lambda_star == 6.0


def test_infeasible_targets(identity6):
    result = check_feasibility(identity6, 2.0, 6.0, 0.0, 6.0)
    assert not result.feasible
    assert result.lambda_star is None
    assert result.f_b < 6.0
    with pytest.raises(SpecError):
        check_feasibility(identity6, 2.0, 1.0, 3.0, 3.0)
    with pytest.raises(CapacityError):
        check_feasibility(GaussianModel(np.eye(23)), 1.0, 1.0, 0.0, 1.0)


def test_expected_active_count_decreases(model6):
    values = [expected_active_count(model6, 3.0, lam) for lam in np.linspace(0.0, 5.0, 21)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_target_for_lambda_round_trips(model6):
    nbar = target_for_lambda(model6, 5.0, 2.0)
    result = check_feasibility(model6, 5.0, nbar, 0.0, 8.0)
    assert result.lambda_star == pytest.approx(2.0, abs=1e-5)


@pytest.mark.slow
def test_learning_converges_to_root():
    model = gen_covariance(10, 7)
    beta, lam_star = 5.0, 2.0
    cache = CostCache(model)
    nbar = target_for_lambda(model, beta, lam_star, cache)
    params = LearningParams(nbar_target=nbar, beta=beta, b=0.0, c=8.0, lambda0=4.0)
    paths, hats, tails = [], [], []
    for seed in range(100):
        trace, state = run_gibbs_learning(model, params, 2000, seed=seed, cache=cache)
        paths.append(trace.lambdas())
        hats.append(state.lambda_hat)
        tails.append(state.tail_mean_popcount)
    hats = np.asarray(hats)
    assert np.count_nonzero(np.abs(hats - lam_star) <= 0.4) >= 90
    mean_path = np.mean(paths, axis=0)
    assert np.all(np.abs(mean_path[999:] - lam_star) <= 0.25)
    assert abs(np.mean(tails) - nbar) <= 0.5
