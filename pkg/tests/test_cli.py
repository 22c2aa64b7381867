import numpy as np
import orjson
import pytest
from typer.testing import CliRunner

from src.cli import app
from src.services.exact_oracle import exhaustive_optimum
from src.services.gaussian_model import make_params
from src.services.harness import gen_covariance
from src.utils.io import write_json

runner = CliRunner()


def invoke(tmp_path, *args: str):
    return runner.invoke(app, ["--out", str(tmp_path), *args])


def parsed(result):
    assert result.exit_code == 0, result.output
    return orjson.loads(result.stdout)


def test_gen_cov_writes_a_loadable_file(tmp_path):
    document = parsed(invoke(tmp_path, "--seed", "4", "gen-cov", "--n", "4"))
    assert document["n"] == 4
    loaded = np.loadtxt(document["path"], delimiter=",")
    np.testing.assert_allclose(loaded, gen_covariance(4, 4).covariance)


def test_exact_reports_optimum_and_stationary_check(tmp_path):
    document = parsed(invoke(tmp_path, "exact", "--n", "5", "--lambda", "1.0", "--check-tpm"))
    best, value = exhaustive_optimum(gen_covariance(5, 0), make_params(1.0))
    assert document["optimum_bits"] == best.to_hex()
    assert set(document["top_k"][0]) == {"bits", "probability"}
    assert document["top_k"][0]["bits"] == best.to_hex()
    assert document["optimum_cost"] == pytest.approx(value)
    assert document["stationary_max_abs_diff"] <= 1e-9
    assert len(document["top_k"]) == 5


def test_model_source_must_be_unique(tmp_path):
    path = tmp_path / "m.csv"
    np.savetxt(path, np.eye(3), delimiter=",")
    assert invoke(tmp_path, "greedy", "--lambda", "1").exit_code == 2
    assert invoke(tmp_path, "greedy", "--lambda", "1", "--n", "3", "--cov", str(path)).exit_code == 2


@pytest.mark.parametrize("document", [
    {"covariance": [[1.0, 0.0], [0.0]]},
    {"n": 3, "covariance": [[1.0, 0.0], [0.0, 1.0]]},
])
def test_malformed_covariance_file_exits_with_input_error(tmp_path, document):
    path = write_json(tmp_path / "m.json", document)
    assert invoke(tmp_path, "greedy", "--lambda", "0.5", "--cov", str(path)).exit_code == 2


def test_invalid_beta_exits_with_input_error(tmp_path):
    assert invoke(tmp_path, "gibbs", "--n", "4", "--lambda", "1", "--beta", "0", "--steps", "10").exit_code == 2


def test_degenerate_covariance_exits_with_code_3(tmp_path, no_jitter):
    path = tmp_path / "ones.csv"
    np.savetxt(path, np.ones((3, 3)), delimiter=",")
    assert invoke(tmp_path, "greedy", "--lambda", "0.1", "--cov", str(path)).exit_code == 3


def test_gibbs_writes_trace(tmp_path):
    document = parsed(invoke(tmp_path, "--seed", "3", "gibbs", "--n", "5", "--lambda", "1",
                             "--beta", "2", "--steps", "200", "--stride", "10"))
    assert document["steps"] == 200
    assert document["best_cost"] <= document["final_cost"]
    lines = (tmp_path / "gibbs_trace_s3.csv").read_text().splitlines()
    assert lines[0] == "t,beta,lambda,bits_hex,popcount,cost"
    assert len(lines) == 21


def test_anneal_defaults_to_a_certified_schedule(tmp_path):
    document = parsed(invoke(tmp_path, "anneal", "--n", "5", "--lambda", "1", "--steps", "100"))
    assert document["beta0"] * 5 * document["delta"] == pytest.approx(0.9)


def test_anneal_rejects_a_hot_start(tmp_path):
    assert invoke(tmp_path, "anneal", "--n", "5", "--lambda", "1", "--steps", "10", "--beta0", "100").exit_code == 2


def test_gibbs_fixed_keeps_budget(tmp_path):
    document = parsed(invoke(tmp_path, "gibbs-fixed", "--n", "6", "--nbar", "2", "--beta", "3",
                             "--steps", "300", "--debug"))
    assert bin(int(document["final_bits_hex"], 16)).count("1") == 2


def test_learn_stays_in_box(tmp_path):
    document = parsed(invoke(tmp_path, "learn", "--n", "5", "--nbar", "2", "--steps", "300",
                             "--c", "4", "--lambda0", "1"))
    assert 0.0 <= document["lambda_hat"] <= 4.0
    assert "expected_active_at_lambda_hat" in document
    assert (tmp_path / "learn_trace_s0.csv").exists()


def test_greedy_commands(tmp_path):
    document = parsed(invoke(tmp_path, "newgreedy", "--n", "6", "--nbar", "3"))
    assert len(document["order"]) == 3
    document = parsed(invoke(tmp_path, "greedy", "--n", "6", "--lambda", "0.0001"))
    assert document["filled_with_nonimproving"] is False


def test_em_commands(tmp_path):
    document = parsed(invoke(tmp_path, "em-static", "--n", "4", "--nbar", "4"))
    np.testing.assert_allclose(document["reconstruction"], document["truth"])
    assert document["converged"] is True
    document = parsed(invoke(tmp_path, "em-sequential", "--n", "4", "--nbar", "2", "--slots", "5"))
    assert len(document["theta_trace"]) == 6
    assert document["converged"] is True


def test_diagnose_writes_bound_table(tmp_path):
    document = parsed(invoke(tmp_path, "diagnose", "--n", "4", "--lambda", "1", "--sweeps", "10"))
    assert document["violations"] == 0
    assert (tmp_path / "diagnose.csv").exists()
    assert orjson.loads((tmp_path / "diagnose.json").read_bytes())["violations"] == 0


def test_run_and_rerun(tmp_path):
    spec = {
        "name": "tiny",
        "kind": "cost_vs_beta",
        "model": {"kind": "generated", "n": 5, "seed": 2},
        "betas": [1.0, 4.0],
        "gibbs_steps": 20,
        "replications": 2,
        "output_dir": str(tmp_path / "first"),
    }
    spec_path = write_json(tmp_path / "spec.json", spec)
    parsed(invoke(tmp_path, "run", str(spec_path)))
    first = tmp_path / "first" / "tiny" / "cost_vs_beta.csv"
    assert first.exists()

    report = tmp_path / "first" / "tiny" / "report.json"
    parsed(invoke(tmp_path / "second", "run", "--rerun", str(report)))
    assert (tmp_path / "second" / "tiny" / "cost_vs_beta.csv").read_bytes() == first.read_bytes()


def test_run_needs_exactly_one_source(tmp_path):
    assert invoke(tmp_path, "run").exit_code == 2
    assert invoke(tmp_path, "run", "--preset", "fig9").exit_code == 2
