"""
Experiment runner: covariance generation, seeded replications and
plot-ready CSV / JSON emission.

Three experiment kinds:
  - cost_vs_beta:  optimum, expected cost under pi_beta, greedy, finite-run basic gibbs
  - error_vs_beta: constrained optimum, restricted pi_beta, newgreedy, finite-run fixed-cardinality gibbs
  - lambda_trace:  gibbs learning paths against an oracle-built target

A report embeds the spec and every derived seed; `rerun_report` reproduces
the same CSV bytes.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.core.config import settings
from src.core.exceptions import SpecError
from src.core.logger import get_logger, run_context
from src.services.baselines import greedy_unconstrained, newgreedy_cardinality
from src.services.constrained_learning import (
    LearningParams,
    check_feasibility,
    expected_active_count,
    expected_error,
    run_gibbs_learning,
    target_for_lambda,
)
from src.services.exact_oracle import (
    enumerate_errors,
    exact_gibbs_from_costs,
    exhaustive_constrained_optimum,
)
from src.services.gaussian_model import CostCache, GaussianModel, popcounts
from src.services.gibbs_samplers import run_basic_gibbs, run_fixed_cardinality_gibbs
from src.utils.io import atomic_write_bytes, load_covariance, read_json, render_csv, write_json
from src.utils.seeding import derive_seed

logger = get_logger(__name__)

LAMBDA_BAND = 0.4
DEFAULT_BETAS = [0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.5, 10.0, 15.0, 20.0]


def gen_covariance(n: int, seed: int) -> GaussianModel:
    """M = A^T A with A uniform on [-1, 1]^(n x n)."""
    if n < 1:
        raise SpecError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, 1.0, size=(n, n))
    m = a.T @ a
    return GaussianModel(0.5 * (m + m.T))


class ModelSource(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["file", "generated"] = "generated"
    path: Optional[str] = None
    n: Optional[int] = Field(default=None, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_source(self) -> ModelSource:
        if self.kind == "file":
            if not self.path:
                raise ValueError("a file model source needs a path")
            if not Path(self.path).exists():
                raise ValueError(f"covariance file not found: {self.path}")
        elif self.n is None:
            raise ValueError("a generated model source needs n")
        return self

    def resolve(self) -> GaussianModel:
        if self.kind == "file":
            return load_covariance(self.path)  # type: ignore[arg-type]
        return gen_covariance(self.n, self.seed)  # type: ignore[arg-type]


class ExperimentSpec(BaseModel):
    """One experiment. `kind` selects the algorithms compared."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    name: str = "experiment"
    kind: Literal["cost_vs_beta", "error_vs_beta", "lambda_trace"]
    model: ModelSource
    betas: List[float] = Field(default_factory=lambda: list(DEFAULT_BETAS))
    lam: float = Field(default=2.3, ge=0.0, alias="lambda")
    nbar: Optional[int] = Field(default=None, ge=0)
    gibbs_steps: int = Field(default=100, ge=1)
    lambda_star: float = Field(default=2.0, ge=0.0)
    learning_beta: float = Field(default=5.0, gt=0.0)
    lambda0: float = Field(default=4.0, ge=0.0)
    b: float = Field(default=0.0, ge=0.0)
    c: Optional[float] = None
    step0: float = Field(default=1.0, gt=0.0)
    learning_steps: int = Field(default=1000, ge=1)
    replications: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    threads: int = Field(default=1, ge=1)
    output_dir: str = settings.OUTPUT_DIRECTORY

    @model_validator(mode="after")
    def _check_kind(self) -> ExperimentSpec:
        if self.kind != "lambda_trace":
            if not self.betas or any(b <= 0 for b in self.betas):
                raise ValueError("betas must be a non-empty list of positive values")
        if self.kind == "error_vs_beta" and self.nbar is None:
            raise ValueError("error_vs_beta needs nbar")
        return self


PRESETS: Dict[str, Dict[str, Any]] = {
    "cost18": {"name": "cost18", "kind": "cost_vs_beta", "model": {"kind": "generated", "n": 18, "seed": 1},
             "lambda": 2.3, "gibbs_steps": 100},
    "error18": {"name": "error18", "kind": "error_vs_beta", "model": {"kind": "generated", "n": 18, "seed": 2},
             "nbar": 10, "gibbs_steps": 100},
    "learn18": {"name": "learn18", "kind": "lambda_trace", "model": {"kind": "generated", "n": 18, "seed": 3},
             "lambda_star": 2.0, "learning_beta": 5.0, "lambda0": 4.0, "learning_steps": 1000,
             "replications": 1000},
}


def parse_spec(document: Dict[str, Any]) -> ExperimentSpec:
    try:
        return ExperimentSpec.model_validate(document)
    except ValidationError as e:
        raise SpecError(f"invalid experiment spec: {e}")


def load_spec(path: str) -> ExperimentSpec:
    return parse_spec(read_json(path))


def preset_spec(name: str, **overrides: Any) -> ExperimentSpec:
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    document = {**PRESETS[name], **{k: v for k, v in overrides.items() if v is not None}}
    return parse_spec(document)


class ExperimentResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    spec: ExperimentSpec
    columns: List[str]
    rows: List[Dict[str, Any]]
    summary: Dict[str, Any]
    seeds: List[Dict[str, int]]

    def csv_text(self) -> str:
        return render_csv(self.rows, self.columns)

    def report(self) -> Dict[str, Any]:
        return {
            "app": settings.APP_NAME,
            "version": settings.VERSION,
            "spec": self.spec.model_dump(by_alias=True),
            "master_seed": self.spec.seed,
            "seeds": self.seeds,
            "summary": self.summary,
        }


def _replicate(spec: ExperimentSpec, task, streams: int) -> Tuple[List[Any], List[Dict[str, int]]]:
    """Run task(replication, stream, seed) for every pair, concurrently across replications."""
    seeds = [
        {"replication": i, "stream": j, "seed": derive_seed(spec.seed, i, j)}
        for i in range(spec.replications) for j in range(streams)
    ]

    def one(i: int) -> List[Any]:
        with run_context(run_id=f"{spec.name}-r{i}"):
            return [task(i, j, derive_seed(spec.seed, i, j)) for j in range(streams)]

    if spec.threads > 1 and spec.replications > 1:
        with ThreadPoolExecutor(max_workers=spec.threads, thread_name_prefix="replication") as pool:
            results = list(pool.map(one, range(spec.replications)))
    else:
        results = [one(i) for i in range(spec.replications)]
    return results, seeds


def _cost_vs_beta(spec: ExperimentSpec, model: GaussianModel) -> ExperimentResult:
    cache = CostCache(model)
    errors = enumerate_errors(model, cache, spec.threads)
    counts = popcounts(model.n)
    h = errors + spec.lam * counts
    optimum = int(np.argmin(h))
    greedy = greedy_unconstrained(model, spec.lam, cache)

    def task(i: int, j: int, seed: int) -> Tuple[float, float]:
        _, state = run_basic_gibbs(model, spec.lam, spec.betas[j], spec.gibbs_steps, seed, cache=cache)
        return state.cost, state.best_cost

    finite, seeds = _replicate(spec, task, len(spec.betas))
    rows = []
    for j, beta in enumerate(spec.betas):
        dist = exact_gibbs_from_costs(h, beta)
        rows.append({
            "beta": beta,
            "optimal_cost": float(h[optimum]),
            "expected_cost": dist.expectation(h),
            "expected_mmse": dist.expectation(errors),
            "expected_active": dist.expectation(counts),
            "greedy_cost": greedy.value,
            "finite_gibbs_cost": float(np.mean([r[j][0] for r in finite])),
            "finite_gibbs_best": float(np.mean([r[j][1] for r in finite])),
        })
    summary = {
        "n": model.n,
        "lambda": spec.lam,
        "optimal_bits_hex": f"{optimum:x}",
        "optimal_cost": float(h[optimum]),
        "optimal_active": int(counts[optimum]),
        "greedy_bits_hex": greedy.config.to_hex(),
        "greedy_cost": greedy.value,
        "greedy_active": greedy.config.popcount,
    }
    return ExperimentResult(spec=spec, columns=list(rows[0]), rows=rows, summary=summary, seeds=seeds)


def _error_vs_beta(spec: ExperimentSpec, model: GaussianModel) -> ExperimentResult:
    nbar = spec.nbar
    if nbar is None or nbar > model.n:
        raise SpecError(f"nbar must lie in [0, {model.n}], got {nbar}")
    cache = CostCache(model)
    errors = enumerate_errors(model, cache, spec.threads)
    mask = popcounts(model.n) == nbar
    best, best_error = exhaustive_constrained_optimum(model, nbar, cache=cache)
    greedy = newgreedy_cardinality(model, nbar, cache)

    def task(i: int, j: int, seed: int) -> float:
        _, state = run_fixed_cardinality_gibbs(model, nbar, spec.betas[j], spec.gibbs_steps, seed, cache=cache)
        return state.cost

    finite, seeds = _replicate(spec, task, len(spec.betas))
    rows = []
    for j, beta in enumerate(spec.betas):
        dist = exact_gibbs_from_costs(errors, beta, mask)
        rows.append({
            "beta": beta,
            "optimal_error": best_error,
            "expected_error": dist.expectation(errors),
            "newgreedy_error": greedy.value,
            "finite_gibbs_error": float(np.mean([r[j] for r in finite])),
        })
    summary = {
        "n": model.n,
        "nbar": nbar,
        "optimal_bits_hex": best.to_hex(),
        "optimal_error": best_error,
        "newgreedy_bits_hex": greedy.config.to_hex(),
        "newgreedy_error": greedy.value,
        "newgreedy_order": greedy.order,
    }
    return ExperimentResult(spec=spec, columns=list(rows[0]), rows=rows, summary=summary, seeds=seeds)


def _lambda_trace(spec: ExperimentSpec, model: GaussianModel) -> ExperimentResult:
    cache = CostCache(model)
    errors = enumerate_errors(model, cache, spec.threads)
    beta = spec.learning_beta
    c = spec.c if spec.c is not None else max(model.trace, spec.b + 1.0)
    nbar = target_for_lambda(model, beta, spec.lambda_star, cache)
    feasibility = check_feasibility(model, beta, nbar, spec.b, c, cache)
    if not feasibility.feasible:
        raise SpecError(f"target nbar = {nbar} is not attainable on [{spec.b}, {c}]")
    params = LearningParams(nbar_target=nbar, beta=beta, step0=spec.step0, b=spec.b, c=c, lambda0=spec.lambda0)

    def task(i: int, j: int, seed: int):
        trace, state = run_gibbs_learning(model, params, spec.learning_steps, seed, cache=cache)
        return np.asarray(trace.lam), np.asarray(trace.popcount), state.lambda_hat

    paths, seeds = _replicate(spec, task, 1)
    lambdas = np.stack([p[0][0] for p in paths])
    active = np.stack([p[0][1] for p in paths])
    hats = np.array([p[0][2] for p in paths])
    mean_path = lambdas.mean(axis=0)
    rows = [
        {"t": t + 1, "lambda_mean": float(mean_path[t]), "lambda_path": float(lambdas[0, t]),
         "popcount_mean": float(active[:, t].mean())}
        for t in range(spec.learning_steps)
    ]
    lambda_hat = float(hats.mean())
    summary = {
        "n": model.n,
        "beta": beta,
        "lambda_star": feasibility.lambda_star,
        "nbar": nbar,
        "box": [spec.b, c],
        "lambda_hat_mean": lambda_hat,
        "paths_near_lambda_star": int(np.sum(np.abs(hats - spec.lambda_star) <= LAMBDA_BAND)),
        "final_mean_lambda": float(mean_path[-1]),
        "expected_mmse_at_lambda_hat": expected_error(model, beta, lambda_hat, errors),
        "expected_active_at_lambda_hat": expected_active_count(model, beta, lambda_hat, errors=errors),
        "expected_mmse_at_lambda_star": expected_error(model, beta, spec.lambda_star, errors),
    }
    return ExperimentResult(spec=spec, columns=list(rows[0]), rows=rows, summary=summary, seeds=seeds)


_RUNNERS = {
    "cost_vs_beta": _cost_vs_beta,
    "error_vs_beta": _error_vs_beta,
    "lambda_trace": _lambda_trace,
}


def run_experiment(spec: ExperimentSpec, write: bool = True) -> ExperimentResult:
    """Run one experiment; with `write`, emit <output_dir>/<name>/{<kind>.csv, report.json}."""
    model = spec.model.resolve()
    started = time.perf_counter()
    with run_context(run_id=spec.name):
        logger.info(f"experiment {spec.name}: kind={spec.kind} N={model.n} replications={spec.replications}")
        result = _RUNNERS[spec.kind](spec, model)
        elapsed = time.perf_counter() - started
        logger.log_structured("INFO", {"event": "experiment_finished", "name": spec.name, "seconds": round(elapsed, 3)})
    if write:
        write_result(result)
    return result


def output_paths(spec: ExperimentSpec) -> Tuple[Path, Path]:
    directory = Path(spec.output_dir) / spec.name
    return directory / f"{spec.kind}.csv", directory / "report.json"


def write_result(result: ExperimentResult) -> Tuple[Path, Path]:
    csv_path, report_path = output_paths(result.spec)
    atomic_write_bytes(csv_path, result.csv_text().encode("utf-8"))
    report = result.report()
    report["files"] = {"csv": str(csv_path)}
    write_json(report_path, report)
    logger.info(f"wrote {csv_path} and {report_path}")
    return csv_path, report_path


def rerun_report(path: str, output_dir: Optional[str] = None) -> ExperimentResult:
    report = read_json(path)
    if not isinstance(report, dict) or "spec" not in report:
        raise SpecError(f"{path} is not an experiment report")
    document = dict(report["spec"])
    if output_dir is not None:
        document["output_dir"] = output_dir
    return run_experiment(parse_spec(document))
