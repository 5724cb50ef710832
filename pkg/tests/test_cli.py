"""
Tests de la CLI fgsmglm : codes de sortie, fichiers produits, surcharges.
"""

import json
from unittest.mock import Mock, patch

import pandas as pd
import pytest

from fgsmglm.core.errors import ExperimentError
from fgsmglm.core.estimators import fit_fgsm
from fgsmglm.core.harness import ExperimentConfig
from fgsmglm.main import EXIT_CHECK, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, build_parser, main

ESTIMATE_CONFIG = """
model:
  family: linear
  beta0: [1.0, 0.0]
penalty:
  family: lasso
  lambda: 0.05
estimator_options:
  restarts: 2
n: 60
seed: 3
"""

LIMIT_CONFIG = """
model:
  family: linear
  beta0: [1.0, 0.0]
penalty:
  family: lasso
  lambda: 1.0
mc_samples: 10000
limit_draws: 5
seed: 4
probe:
  C: 1.0
  n_grid: [100, 10000]
  mc_samples: 5000
  directions: 8
"""

EXPERIMENT_CONFIG = """
model:
  family: logistic
  beta0: [1.0, 0.0]
penalty:
  family: lasso
  lambda: 0.5
n_grid: [80]
replications: 2
estimator_options:
  restarts: 2
limit_draws: 10
mc_samples: 10000
master_seed: 11
"""


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Cache et dossier de sortie par défaut confinés au dossier temporaire."""
    monkeypatch.setenv("FGSMGLM_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("FGSMGLM_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("FGSMGLM_MOMENT_SAMPLES", "10000")


def _write(tmp_path, name: str, content: str):
    path = tmp_path / name
    path.write_text(content)
    return str(path)


class TestParser:
    """Tests de l'analyseur d'arguments."""

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train"])

    def test_defaults(self):
        args = build_parser().parse_args(["report"])
        assert args.format == "all"
        assert not args.check


class TestConfigErrors:
    """Configuration absente ou invalide : code 2."""

    def test_missing_config_flag(self):
        assert main(["estimate"]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["estimate", "--config", str(tmp_path / "absent.yaml")]) == EXIT_CONFIG

    def test_invalid_experiment_config(self, tmp_path):
        path = _write(tmp_path, "bad.yaml", "model:\n  beta0: [1.0]\nn_grid: [400, 100]\n")
        assert main(["experiment", "--config", path]) == EXIT_CONFIG

    def test_negative_seed(self, tmp_path):
        path = _write(tmp_path, "est.yaml", ESTIMATE_CONFIG)
        assert main(["estimate", "--config", path, "--seed", "-1"]) == EXIT_CONFIG

    def test_missing_data_file(self, tmp_path):
        path = _write(tmp_path, "est.yaml", ESTIMATE_CONFIG)
        assert main(["estimate", "--config", path, "--data", str(tmp_path / "none.csv")]) == EXIT_CONFIG

    def test_oracle_requires_grid(self, tmp_path):
        path = _write(tmp_path, "exp.yaml", EXPERIMENT_CONFIG)
        assert main(["oracle", "--config", path, "--out", str(tmp_path / "out")]) == EXIT_CONFIG

    def test_report_without_records(self, tmp_path):
        assert main(["report", "--out", str(tmp_path / "empty")]) == EXIT_CONFIG


class TestEstimateAndPerturb:
    """Commandes ponctuelles sur données simulées."""

    def test_estimate_writes_result(self, tmp_path):
        path = _write(tmp_path, "est.yaml", ESTIMATE_CONFIG)
        out = tmp_path / "out"
        assert main(["estimate", "--config", path, "--out", str(out)]) == EXIT_OK

        payload = json.loads((out / "estimate.json").read_text())
        assert set(payload) == {"beta_hat", "objective", "converged", "active_set", "iterations", "restart_index"}
        assert len(payload["beta_hat"]) == 2

    def test_estimate_with_frozen_signs(self, tmp_path):
        path = _write(tmp_path, "est.yaml", ESTIMATE_CONFIG + "frozen_signs: true\n")
        out = tmp_path / "out"
        with patch("fgsmglm.main.fit_fgsm", wraps=fit_fgsm) as mock_fit:
            assert main(["estimate", "--config", path, "--out", str(out)]) == EXIT_OK
        assert mock_fit.call_args.args[0].frozen_signs is not None
        assert len(json.loads((out / "estimate.json").read_text())["beta_hat"]) == 2

    def test_estimate_from_csv(self, tmp_path):
        path = _write(tmp_path, "est.yaml", ESTIMATE_CONFIG.replace("estimator_options", "estimator: mle\nestimator_options"))
        data = _write(tmp_path, "data.csv", "x1,x2,y\n1,0,2\n0,1,-1\n1,1,1.5\n")
        out = tmp_path / "out"
        assert main(["estimate", "--config", path, "--data", data, "--out", str(out)]) == EXIT_OK
        assert json.loads((out / "estimate.json").read_text())["converged"]

    def test_perturb_writes_csv(self, tmp_path):
        path = _write(tmp_path, "est.yaml", ESTIMATE_CONFIG)
        out = tmp_path / "out"
        assert main(["perturb", "--config", path, "--out", str(out)]) == EXIT_OK

        perturbed = pd.read_csv(out / "perturbed.csv")
        assert list(perturbed.columns) == ["x1", "x2", "y"]
        assert len(perturbed) == 60
        payload = json.loads((out / "perturb.json").read_text())
        assert payload["objective"] == pytest.approx(payload["perturbed_loglik"], rel=1e-12, abs=1e-10)


class TestExperimentCommands:
    """Commandes d'expérience, avec le harnais simulé quand c'est possible."""

    def _report(self, slope):
        return Mock(consistency_slope=slope, nonconvergence_rate=0.0, ks_statistics=[])

    def test_overrides_reach_runner(self, tmp_path):
        path = _write(tmp_path, "exp.yaml", EXPERIMENT_CONFIG)
        out = tmp_path / "out"
        with patch("fgsmglm.main.run_experiment", return_value=self._report(0.01)) as mock_run:
            code = main(["experiment", "--config", path, "--out", str(out), "--seed", "99", "--threads", "2"])

        assert code == EXIT_OK
        config = mock_run.call_args.args[0]
        assert isinstance(config, ExperimentConfig)
        assert config.master_seed == 99
        assert config.threads == 2
        assert config.output_dir == str(out)
        assert config.mc_samples == 10000

    def test_check_failure(self, tmp_path):
        path = _write(tmp_path, "exp.yaml", EXPERIMENT_CONFIG)
        with patch("fgsmglm.main.run_experiment", return_value=self._report(-0.4)):
            assert main(["experiment", "--config", path, "--check"]) == EXIT_CHECK
        with patch("fgsmglm.main.run_experiment", return_value=self._report(-0.4)):
            assert main(["experiment", "--config", path]) == EXIT_OK

    def test_experiment_error(self, tmp_path):
        path = _write(tmp_path, "exp.yaml", EXPERIMENT_CONFIG)
        with patch("fgsmglm.main.run_experiment", side_effect=ExperimentError("too many failures")):
            assert main(["experiment", "--config", path]) == EXIT_FAILURE

    def test_experiment_then_report(self, tmp_path):
        path = _write(tmp_path, "exp.yaml", EXPERIMENT_CONFIG)
        out = tmp_path / "run"
        assert main(["experiment", "--config", path, "--out", str(out)]) == EXIT_OK
        assert (out / "records.csv").exists()

        assert main(["report", "--out", str(out), "--format", "csv"]) == EXIT_OK
        summary = pd.read_csv(out / "summary.csv")
        assert sorted(summary["estimator"]) == ["fgsm", "penalized"]

        assert main(["report", "--out", str(out)]) == EXIT_OK
        assert (out / "plotdata" / "consistency_fgsm.csv").exists()


class TestLimitCommand:
    """Commande limit : tirages limites et tables de diagnostics."""

    def test_conditions_csv_columns(self, tmp_path):
        path = _write(tmp_path, "limit.yaml", LIMIT_CONFIG)
        out = tmp_path / "out"
        assert main(["limit", "--config", path, "--out", str(out)]) == EXIT_OK

        conditions = pd.read_csv(out / "conditions.csv")
        assert list(conditions.columns[:3]) == ["n", "eq8_sup", "eq9_sup"]
        assert conditions["n"].tolist() == [100, 10000]

        payload = json.loads((out / "limit.json").read_text())
        assert len(payload["u_star_samples"]) == 5
        assert "sign_conditions" in payload["diagnostics"]
