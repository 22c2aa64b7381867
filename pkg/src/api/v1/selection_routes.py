from typing import Optional

from fastapi import APIRouter
from pydantic import BaseModel, Field

from src.core.config import settings
from src.core.logger import get_logger, run_context
from src.services.baselines import greedy_unconstrained, newgreedy_cardinality
from src.services.constrained_learning import LearningParams, expected_active_count, expected_error, run_gibbs_learning
from src.services.exact_oracle import enumerate_costs, enumerate_errors, exact_gibbs, exhaustive_optimum
from src.services.gaussian_model import CostCache, make_params
from src.services.gibbs_samplers import BetaSchedule, run_basic_gibbs, run_modified_gibbs
from src.utils.dependencies import ModelRequest, http_error, resolve_model

logger = get_logger(__name__)

router = APIRouter()

MAX_STEPS = 5_000_000


class ExactRequest(ModelRequest):
    lam: float = Field(ge=0.0, alias="lambda")
    beta: float = Field(default=1.0, gt=0.0)
    top_k: int = Field(default=5, ge=1, le=100)


class GibbsRequest(ModelRequest):
    lam: float = Field(ge=0.0, alias="lambda")
    beta: float = Field(default=1.0, gt=0.0)
    steps: int = Field(ge=1, le=MAX_STEPS)
    seed: int = Field(default=0, ge=0)


class AnnealRequest(ModelRequest):
    lam: float = Field(ge=0.0, alias="lambda")
    beta0: float = Field(gt=0.0)
    steps: int = Field(ge=1, le=MAX_STEPS)
    seed: int = Field(default=0, ge=0)


class GreedyRequest(ModelRequest):
    lam: float = Field(ge=0.0, alias="lambda")


class NewGreedyRequest(ModelRequest):
    nbar: int = Field(ge=0)


class LearnRequest(ModelRequest):
    nbar: float = Field(ge=0.0)
    beta: float = Field(default=5.0, gt=0.0)
    steps: int = Field(ge=1, le=MAX_STEPS)
    seed: int = Field(default=0, ge=0)
    lambda0: Optional[float] = None
    b: float = Field(default=0.0, ge=0.0)
    c: Optional[float] = None
    step0: float = Field(default=1.0, gt=0.0)
    tail_window: Optional[int] = Field(default=None, ge=1)


class ChainResponse(BaseModel):
    final_bits: str
    final_cost: float
    best_bits: str
    best_cost: float
    steps: int


def _chain_response(state) -> ChainResponse:
    return ChainResponse(
        final_bits=state.config.to_hex(),
        final_cost=state.cost,
        best_bits=state.best_config.to_hex(),
        best_cost=state.best_cost,
        steps=state.t,
    )


@router.post("/select/exact")
def select_exact(req: ExactRequest):
    try:
        model = resolve_model(req)
        params = make_params(req.lam, req.beta)
        cache = CostCache(model)
        best, best_cost = exhaustive_optimum(model, params, cache)
        dist = exact_gibbs(model, params, cache)
        return {
            "optimum_bits": best.to_hex(),
            "optimum_cost": best_cost,
            "log_partition": dist.log_partition,
            "expected_cost": dist.expectation(enumerate_costs(model, req.lam, cache)),
            "top_k": [{"bits": f"{b:x}", "probability": p} for b, p in dist.top_k(req.top_k)],
        }
    except Exception as e:
        raise http_error(e)


@router.post("/select/gibbs", response_model=ChainResponse)
def select_gibbs(req: GibbsRequest):
    try:
        model = resolve_model(req)
        with run_context(run_id=f"gibbs-{req.seed}"):
            _, state = run_basic_gibbs(model, req.lam, req.beta, req.steps, req.seed)
        return _chain_response(state)
    except Exception as e:
        raise http_error(e)


@router.post("/select/anneal", response_model=ChainResponse)
def select_anneal(req: AnnealRequest):
    try:
        model = resolve_model(req)
        cache = CostCache(model)
        schedule = BetaSchedule.logarithmic_for(model, req.lam, req.beta0, cache)
        with run_context(run_id=f"anneal-{req.seed}"):
            _, state = run_modified_gibbs(model, req.lam, schedule, req.steps, req.seed, cache=cache)
        return _chain_response(state)
    except Exception as e:
        raise http_error(e)


@router.post("/select/greedy")
def select_greedy(req: GreedyRequest):
    try:
        return greedy_unconstrained(resolve_model(req), req.lam).to_dict()
    except Exception as e:
        raise http_error(e)


@router.post("/select/newgreedy")
def select_newgreedy(req: NewGreedyRequest):
    try:
        return newgreedy_cardinality(resolve_model(req), req.nbar).to_dict()
    except Exception as e:
        raise http_error(e)


@router.post("/select/learn")
def select_learn(req: LearnRequest):
    try:
        model = resolve_model(req)
        params = LearningParams(
            nbar_target=req.nbar, beta=req.beta, step0=req.step0, b=req.b, c=req.c, lambda0=req.lambda0,
        )
        cache = CostCache(model)
        with run_context(run_id=f"learn-{req.seed}"):
            _, state = run_gibbs_learning(model, params, req.steps, req.seed, req.tail_window, cache)
        summary = {
            "lambda_hat": state.lambda_hat,
            "tail_mean_popcount": state.tail_mean_popcount,
            "final_lambda": state.lam,
            "final_bits": state.chain.config.to_hex(),
        }
        if model.n <= settings.EXACT_GIBBS_CAP:
            errors = enumerate_errors(model, cache)
            summary["expected_active_at_lambda_hat"] = expected_active_count(model, req.beta, state.lambda_hat, errors=errors)
            summary["expected_mmse_at_lambda_hat"] = expected_error(model, req.beta, state.lambda_hat, errors)
        return summary
    except Exception as e:
        raise http_error(e)
