"""
Générateur de rapports d'expérience : JSON complet, CSV à plat et séries
(x, y) prêtes pour n'importe quel outil de tracé.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
import structlog

from fgsmglm.core.harness import ESTIMATORS, ExperimentReport

logger = structlog.get_logger(__name__)

REPORT_FILE = "report.json"
SUMMARY_FILE = "summary.csv"
PLOTDATA_DIR = "plotdata"

FORMATS = ("json", "csv", "plotdata")


class ReportGenerator:
    """Écrit un ExperimentReport sous les trois formats supportés."""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)

    def emit(self, report: ExperimentReport, format: str = "json", oracle_rows: Optional[pd.DataFrame] = None) -> List[Path]:
        """
        Écrit le rapport et retourne la liste des fichiers produits.

        Args:
            report: Rapport calculé
            format: "json", "csv" ou "plotdata"
            oracle_rows: Table de l'étude oracle, ajoutée aux séries plotdata si fournie
        """
        if format not in FORMATS:
            raise ValueError(f"Unknown report format '{format}' (expected one of {FORMATS})")
        self.output_dir.mkdir(parents=True, exist_ok=True)

        if format == "json":
            files = [self._write_json(report)]
        elif format == "csv":
            files = [self._write_csv(report)]
        else:
            files = self._write_plotdata(report, oracle_rows)

        logger.info("Report emitted", format=format, files=[str(f) for f in files])
        return files

    def _write_json(self, report: ExperimentReport) -> Path:
        path = self.output_dir / REPORT_FILE
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
        return path

    def summary_frame(self, report: ExperimentReport) -> pd.DataFrame:
        """Une ligne par (estimateur, n)."""
        rows: List[Dict[str, Any]] = []
        for estimator in ESTIMATORS:
            for summary in report.summary_for(estimator):
                row = {key: value for key, value in summary.items() if key != "zero_recovery"}
                for j, value in enumerate(summary["zero_recovery"], start=1):
                    row[f"zero_recovery_{j}"] = value
                rows.append({"estimator": estimator, **row})
        return pd.DataFrame(rows)

    def _write_csv(self, report: ExperimentReport) -> Path:
        path = self.output_dir / SUMMARY_FILE
        self.summary_frame(report).to_csv(path, index=False, float_format="%.17g")
        return path

    def _write_plotdata(self, report: ExperimentReport, oracle_rows: Optional[pd.DataFrame]) -> List[Path]:
        plot_dir = self.output_dir / PLOTDATA_DIR
        plot_dir.mkdir(parents=True, exist_ok=True)
        files = []

        for estimator in ESTIMATORS:
            consistency = pd.DataFrame(
                [
                    {"x": s["n"], "y": s["median_norm"]}
                    for s in sorted(report.summary_for(estimator), key=lambda s: s["n"])
                ],
                columns=["x", "y"],
            )
            path = plot_dir / f"consistency_{estimator}.csv"
            consistency.to_csv(path, index=False, float_format="%.17g")
            files.append(path)

            ks = pd.DataFrame(
                [{"x": row["coordinate"], "y": row["statistic"]} for row in report.ks_for(estimator)],
                columns=["x", "y"],
            )
            path = plot_dir / f"ks_{estimator}.csv"
            ks.to_csv(path, index=False, float_format="%.17g")
            files.append(path)

        if oracle_rows is not None and not oracle_rows.empty:
            oracle = pd.DataFrame({"x": oracle_rows["lambda0"], "y": oracle_rows["p_zero"]})
            path = plot_dir / "oracle.csv"
            oracle.to_csv(path, index=False, float_format="%.17g")
            files.append(path)

        return files


def emit_report(
    report: ExperimentReport,
    format: str,
    output_dir: Union[str, Path],
    oracle_rows: Optional[pd.DataFrame] = None,
) -> List[Path]:
    """Raccourci fonctionnel vers ReportGenerator.emit."""
    return ReportGenerator(output_dir).emit(report, format, oracle_rows)


def load_report(path: Union[str, Path]) -> ExperimentReport:
    """Relit report.json (ou un dossier qui le contient)."""
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_FILE
    with open(path, "r", encoding="utf-8") as f:
        return ExperimentReport.from_dict(json.load(f))
