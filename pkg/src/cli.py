"""
Command-line entry: `python -m src <command> ...`.

Results go to stdout as JSON; traces and reports go under --out. Exit codes:
0 success, 2 invalid input, 3 degenerate covariance.
"""

import functools
import uuid
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import typer
from pydantic import ValidationError
from rich.console import Console

from src.core.config import settings
from src.core.exceptions import SensorSelectError, SpecError
from src.core.logger import get_logger, set_global_context, set_global_level, shutdown_logging
from src.services.baselines import greedy_unconstrained, newgreedy_cardinality
from src.services.constrained_learning import (
    LearningParams,
    expected_active_count,
    expected_error,
    run_gibbs_learning,
)
from src.services.em_estimation import (
    CommonMeanFamily,
    GaussianSource,
    em_sequential_select,
    em_static_select,
)
from src.services.exact_oracle import (
    contraction_study,
    delta_upper_bound,
    enumerate_costs,
    enumerate_errors,
    exact_gibbs,
    exact_tpm,
    exhaustive_optimum,
    stationary_distribution,
)
from src.services.gaussian_model import CostCache, GaussianModel, make_params, popcounts
from src.services.gibbs_samplers import (
    BetaSchedule,
    run_basic_gibbs,
    run_fixed_cardinality_gibbs,
    run_modified_gibbs,
)
from src.services.harness import (
    gen_covariance,
    load_spec,
    preset_spec,
    rerun_report,
    run_experiment,
)
from src.utils.io import dumps_json, load_covariance, save_covariance, write_csv, write_json
from src.utils.seeding import derive_seed

logger = get_logger(__name__)
console = Console(stderr=True)

app = typer.Typer(name="sensor-select", help="Sensor subset selection by Gibbs sampling.", no_args_is_help=True)


class State:
    seed: int = 0
    threads: int = settings.DEFAULT_THREADS
    out: Path = Path(settings.OUTPUT_DIRECTORY)


state = State()


def handle_errors(func: Callable) -> Callable:
    """Turn package errors into exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ValidationError as e:
            console.print(f"[red]error:[/red] {e}")
            raise typer.Exit(code=SpecError.exit_code)
        except SensorSelectError as e:
            logger.error(f"{func.__name__} failed: {e}")
            console.print(f"[red]error:[/red] {e}")
            raise typer.Exit(code=e.exit_code)

    return wrapper


def emit(document: Any) -> None:
    typer.echo(dumps_json(document).decode("utf-8"))


def load_model(cov: Optional[Path], n: Optional[int], model_seed: Optional[int]) -> GaussianModel:
    if (cov is None) == (n is None):
        raise SpecError("give exactly one of --cov FILE or --n N")
    if cov is not None:
        return load_covariance(cov)
    return gen_covariance(n, state.seed if model_seed is None else model_seed)  # type: ignore[arg-type]


CovOption = typer.Option(None, "--cov", help="Covariance file (CSV or JSON).")
NOption = typer.Option(None, "--n", help="Generate an N x N covariance instead of loading one.")
ModelSeedOption = typer.Option(None, "--model-seed", help="Seed for the generated covariance (default: --seed).")


@app.callback()
def main_options(
    seed: int = typer.Option(0, "--seed", min=0, help="Master seed."),
    threads: int = typer.Option(settings.DEFAULT_THREADS, "--threads", min=1),
    out: Path = typer.Option(Path(settings.OUTPUT_DIRECTORY), "--out", help="Output directory."),
    log_level: Optional[str] = typer.Option(None, "--log-level"),
):
    state.seed, state.threads, state.out = seed, threads, out
    set_global_context(run_id=uuid.uuid4().hex[:8])
    if log_level:
        set_global_level(log_level)


@app.command("gen-cov")
@handle_errors
def gen_cov(
    n: int = typer.Option(..., "--n", min=1),
    file: Optional[Path] = typer.Option(None, "--file", help="Target file (default <out>/cov_n<N>_s<seed>.csv)."),
):
    """Generate M = A^T A, A uniform on [-1, 1]."""
    model = gen_covariance(n, state.seed)
    path = save_covariance(file or state.out / f"cov_n{n}_s{state.seed}.csv", model)
    emit({"path": str(path), "n": n, "seed": state.seed, "trace": model.trace})


@app.command()
@handle_errors
def run(
    spec: Optional[Path] = typer.Argument(None, help="Experiment spec (JSON)."),
    preset: Optional[str] = typer.Option(None, "--preset", help="cost18, error18 or learn18."),
    rerun: Optional[Path] = typer.Option(None, "--rerun", help="Re-run the spec embedded in a report."),
    replications: Optional[int] = typer.Option(None, "--replications", min=1),
):
    """Run an experiment and write its CSV and report."""
    if sum(x is not None for x in (spec, preset, rerun)) != 1:
        raise SpecError("give exactly one of SPEC, --preset or --rerun")
    if rerun is not None:
        result = rerun_report(str(rerun), str(state.out))
    else:
        if preset is not None:
            experiment = preset_spec(preset, replications=replications, seed=state.seed,
                                     threads=state.threads, output_dir=str(state.out))
        else:
            experiment = load_spec(str(spec))
            if replications is not None:
                experiment = experiment.model_copy(update={"replications": replications})
        result = run_experiment(experiment)
    console.print(f"[green]{result.spec.name}[/green]: {len(result.rows)} rows")
    emit(result.summary)


@app.command()
@handle_errors
def exact(
    lam: float = typer.Option(..., "--lambda", min=0.0),
    beta: float = typer.Option(1.0, "--beta", min=0.0),
    top_k: int = typer.Option(5, "--top-k", min=1),
    check_tpm: bool = typer.Option(False, "--check-tpm", help="Also solve the chain's stationary law (N <= 12)."),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """Exhaustive optimum and the exact Gibbs distribution."""
    model = load_model(cov, n, model_seed)
    params = make_params(lam, beta)
    cache = CostCache(model)
    best, best_cost = exhaustive_optimum(model, params, cache, state.threads)
    dist = exact_gibbs(model, params, cache, state.threads)
    errors = enumerate_errors(model, cache)
    counts = popcounts(model.n)
    result = {
        "n": model.n,
        "optimum_bits": best.to_hex(),
        "optimum_active": list(best.active()),
        "optimum_cost": best_cost,
        "log_partition": dist.log_partition,
        "expected_cost": dist.expectation(enumerate_costs(model, lam, cache)),
        "expected_mmse": dist.expectation(errors),
        "expected_active": dist.expectation(counts),
        "top_k": [{"bits": f"{b:x}", "probability": p} for b, p in dist.top_k(top_k)],
    }
    if check_tpm:
        stationary = stationary_distribution(exact_tpm(model, params, cache).matrix)
        result["stationary_max_abs_diff"] = float(np.max(np.abs(stationary - dist.probs)))
    emit(result)


def _chain_summary(name: str, trace, chain, seed: int) -> dict:
    path = write_csv(state.out / f"{name}_trace_s{seed}.csv", trace.rows(), trace.COLUMNS)
    return {
        "seed": seed,
        "steps": chain.t,
        "final_bits_hex": chain.config.to_hex(),
        "final_cost": chain.cost,
        "best_bits_hex": chain.best_config.to_hex(),
        "best_cost": chain.best_cost,
        "stopped_early": trace.stopped_early,
        "trace": str(path),
    }


@app.command()
@handle_errors
def gibbs(
    lam: float = typer.Option(..., "--lambda", min=0.0),
    beta: float = typer.Option(..., "--beta"),
    steps: int = typer.Option(..., "--steps", min=1),
    stride: int = typer.Option(1, "--stride", min=1),
    patience: Optional[int] = typer.Option(None, "--patience", min=1, help="Heuristic early stop."),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """Fixed-beta Gibbs sampler."""
    model = load_model(cov, n, model_seed)
    trace, chain = run_basic_gibbs(model, lam, beta, steps, state.seed, stride, patience)
    emit(_chain_summary("gibbs", trace, chain, state.seed))


@app.command()
@handle_errors
def anneal(
    lam: float = typer.Option(..., "--lambda", min=0.0),
    steps: int = typer.Option(..., "--steps", min=1),
    beta0: Optional[float] = typer.Option(None, "--beta0", help="Default: 0.9 / (N * Delta)."),
    stride: int = typer.Option(1, "--stride", min=1),
    patience: Optional[int] = typer.Option(None, "--patience", min=1),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """Gibbs sampler with beta(t) = beta0 * log(1 + t)."""
    model = load_model(cov, n, model_seed)
    cache = CostCache(model)
    delta = delta_upper_bound(model, make_params(lam), cache)
    if beta0 is None:
        beta0 = 0.9 / (model.n * delta) if delta > 0 else 1.0
    schedule = BetaSchedule.logarithmic(beta0, model.n, delta)
    trace, chain = run_modified_gibbs(model, lam, schedule, steps, state.seed, stride, patience, cache)
    summary = _chain_summary("anneal", trace, chain, state.seed)
    summary.update({"beta0": beta0, "delta": delta})
    emit(summary)


@app.command("gibbs-fixed")
@handle_errors
def gibbs_fixed(
    nbar: int = typer.Option(..., "--nbar", min=0),
    beta: float = typer.Option(..., "--beta"),
    steps: int = typer.Option(..., "--steps", min=1),
    stride: int = typer.Option(1, "--stride", min=1),
    debug: bool = typer.Option(False, "--debug", help="Check |B| = nbar after every step."),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """Swap-move Gibbs sampler on the slice |B| = nbar."""
    model = load_model(cov, n, model_seed)
    trace, chain = run_fixed_cardinality_gibbs(model, nbar, beta, steps, state.seed, stride, debug=debug)
    emit(_chain_summary("gibbs_fixed", trace, chain, state.seed))


@app.command()
@handle_errors
def learn(
    nbar: float = typer.Option(..., "--nbar", min=0.0),
    steps: int = typer.Option(..., "--steps", min=1),
    beta: float = typer.Option(5.0, "--beta"),
    lambda0: Optional[float] = typer.Option(None, "--lambda0"),
    b: float = typer.Option(0.0, "--b", min=0.0),
    c: Optional[float] = typer.Option(None, "--c", help="Default: tr(M)."),
    step0: float = typer.Option(1.0, "--step0"),
    tail_window: Optional[int] = typer.Option(None, "--tail-window", min=1),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """Gibbs learning of the activation price for a mean active count nbar."""
    model = load_model(cov, n, model_seed)
    params = LearningParams(nbar_target=nbar, beta=beta, step0=step0, b=b, c=c, lambda0=lambda0)
    cache = CostCache(model)
    trace, learned = run_gibbs_learning(model, params, steps, state.seed, tail_window, cache)
    path = write_csv(state.out / f"learn_trace_s{state.seed}.csv", trace.rows(), trace.COLUMNS)
    summary = {
        "seed": state.seed,
        "lambda_hat": learned.lambda_hat,
        "tail_mean_popcount": learned.tail_mean_popcount,
        "final_lambda": learned.lam,
        "trace": str(path),
    }
    if model.n <= settings.EXACT_GIBBS_CAP:
        errors = enumerate_errors(model, cache)
        summary["expected_active_at_lambda_hat"] = expected_active_count(model, beta, learned.lambda_hat, errors=errors)
        summary["expected_mmse_at_lambda_hat"] = expected_error(model, beta, learned.lambda_hat, errors)
    emit(summary)


@app.command()
@handle_errors
def greedy(
    lam: float = typer.Option(..., "--lambda", min=0.0),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """Single serial pass, strict improvement."""
    emit(greedy_unconstrained(load_model(cov, n, model_seed), lam).to_dict())


@app.command()
@handle_errors
def newgreedy(
    nbar: int = typer.Option(..., "--nbar", min=0),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """Best-first addition up to nbar sensors."""
    emit(newgreedy_cardinality(load_model(cov, n, model_seed), nbar).to_dict())


@app.command("em-static")
@handle_errors
def em_static(
    nbar: int = typer.Option(..., "--nbar", min=1),
    theta0: float = typer.Option(0.0, "--theta0"),
    theta_true: float = typer.Option(1.0, "--theta-true", help="Mean of the simulated realization."),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """Sample sensors one at a time from a single realization, refitting theta by EM."""
    model = load_model(cov, n, model_seed)
    oracle, x = GaussianSource(model, theta_true, derive_seed(state.seed, 0, 1)).static_oracle()
    result = em_static_select(CommonMeanFamily(model, theta0), oracle, nbar)
    document = result.to_dict()
    document["truth"] = x
    emit(document)


@app.command("em-sequential")
@handle_errors
def em_sequential(
    nbar: int = typer.Option(..., "--nbar", min=1),
    slots: int = typer.Option(..., "--slots", min=1),
    theta0: float = typer.Option(0.0, "--theta0"),
    theta_true: float = typer.Option(1.0, "--theta-true"),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """One selection per slot on iid snapshots, theta refit by EM on everything observed."""
    model = load_model(cov, n, model_seed)
    source = GaussianSource(model, theta_true, derive_seed(state.seed, 0, 1))
    result = em_sequential_select(CommonMeanFamily(model, theta0), source.snapshot_stream(), nbar, slots, state.seed)
    path = write_csv(state.out / f"em_sequential_s{state.seed}.csv", result.rows(), result.COLUMNS)
    emit({
        "theta": result.theta_trace[-1], "theta_trace": result.theta_trace,
        "converged": result.converged, "csv": str(path),
    })


@app.command()
@handle_errors
def diagnose(
    lam: float = typer.Option(..., "--lambda", min=0.0),
    beta: float = typer.Option(1.0, "--beta", min=0.0),
    sweeps: int = typer.Option(20, "--sweeps", min=1),
    cov: Optional[Path] = CovOption,
    n: Optional[int] = NOption,
    model_seed: Optional[int] = ModelSeedOption,
):
    """Total-variation distance to pi_beta per sweep against the Dobrushin bound."""
    model = load_model(cov, n, model_seed)
    study = contraction_study(model, make_params(lam, beta), sweeps)
    path = write_csv(state.out / "diagnose.csv", study.rows(), ("sweep", "tv", "bound"))
    document = {"n": model.n, "delta": study.delta, "violations": study.violations, "csv": str(path)}
    write_json(state.out / "diagnose.json", document)
    emit(document)


def main() -> None:
    try:
        app()
    finally:
        shutdown_logging()
