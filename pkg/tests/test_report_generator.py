"""
Tests du générateur de rapports (JSON, CSV, plotdata).
"""

import pandas as pd
import pytest

from fgsmglm.core.harness import ExperimentReport
from fgsmglm.core.report_generator import ReportGenerator, emit_report, load_report


def _summary(n: int, median: float, p_zero: float) -> dict:
    return {
        "n": n,
        "replications": 10,
        "converged": 10,
        "median_norm": median,
        "q90_norm": median * 2,
        "zero_recovery": [0.0, p_zero],
        "p_zero": p_zero,
        "support_recovery": p_zero,
        "sign_errors": 0,
    }


def _ks(statistic: float) -> list:
    return [
        {"coordinate": j, "n": 1600, "n_records": 10, "n_draws": 50, "excluded_nonconverged": 0,
         "low_power": True, "statistic": statistic, "pvalue": 0.5}
        for j in (1, 2)
    ]


class TestReportGenerator:
    """Tests d'émission des rapports."""

    def setup_method(self):
        self.n_grid = [100, 400, 1600]
        self.report = ExperimentReport(
            settings={"family": "linear", "beta0": [1.0, 0.0], "n_grid": self.n_grid},
            per_n=[_summary(n, 1.0, 0.8) for n in self.n_grid],
            ks_statistics=_ks(0.12),
            consistency_slope=0.0,
            baseline_comparison={
                "per_n": [_summary(n, 1.2, 0.0) for n in self.n_grid],
                "ks_statistics": _ks(0.2),
                "consistency_slope": 0.0,
            },
            nonconverged={"fgsm": 0, "penalized": 0},
            nonconvergence_rate=0.0,
        )

    def test_json_round_trip(self, tmp_path):
        files = emit_report(self.report, "json", tmp_path)
        assert files == [tmp_path / "report.json"]
        assert load_report(tmp_path).to_dict() == self.report.to_dict()

    def test_csv_one_row_per_estimator_and_n(self, tmp_path):
        (path,) = emit_report(self.report, "csv", tmp_path)
        frame = pd.read_csv(path)
        assert len(frame) == 2 * len(self.n_grid)
        for estimator in ("fgsm", "penalized"):
            assert frame.loc[frame["estimator"] == estimator, "n"].tolist() == self.n_grid
        assert "zero_recovery_2" in frame.columns
        assert "zero_recovery" not in frame.columns

    def test_plotdata_consistency_series(self, tmp_path):
        files = ReportGenerator(tmp_path).emit(self.report, "plotdata")
        assert {f.name for f in files} == {
            "consistency_fgsm.csv", "consistency_penalized.csv", "ks_fgsm.csv", "ks_penalized.csv"
        }
        series = pd.read_csv(tmp_path / "plotdata" / "consistency_fgsm.csv")
        assert list(series.columns) == ["x", "y"]
        assert len(series) == len(self.n_grid)
        assert series["x"].is_monotonic_increasing and series["x"].is_unique

        ks = pd.read_csv(tmp_path / "plotdata" / "ks_penalized.csv")
        assert ks["y"].tolist() == [0.2, 0.2]

    def test_plotdata_oracle_series(self, tmp_path):
        rows = pd.DataFrame({"lambda0": [0.0, 1.0, 2.0], "p_zero": [0.0, 0.4, 0.9]})
        files = emit_report(self.report, "plotdata", tmp_path, oracle_rows=rows)
        assert tmp_path / "plotdata" / "oracle.csv" in files
        oracle = pd.read_csv(tmp_path / "plotdata" / "oracle.csv")
        assert oracle["y"].tolist() == [0.0, 0.4, 0.9]

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(self.report, "html", tmp_path)
        assert not (tmp_path / "report.json").exists()
