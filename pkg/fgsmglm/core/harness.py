"""
Harnais d'expériences Monte Carlo.

Réplique l'estimation sur une grille de tailles d'échantillon, compare la loi
empirique de √n(β̂ − β₀) à la loi limite, et conduit les études oracle et de
neutralité de signe. Les enregistrements sont persistés en CSV ; le rapport est
une fonction pure de ces enregistrements.
"""

from __future__ import annotations

import json
import math
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Type, TypeVar, Union

import numpy as np
import pandas as pd
import structlog
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.stats import ks_2samp

from fgsmglm.core import prometheus_metrics as metrics
from fgsmglm.core.adversarial import AdversarialObjective
from fgsmglm.core.asymptotics import (
    LimitProblem,
    PenaltyCase,
    compute_moments,
    sample_limit_draws,
)
from fgsmglm.core.cache_manager import CacheManager
from fgsmglm.core.errors import ConfigError, ExperimentError, FgsmGlmError
from fgsmglm.core.estimators import EstimateResult, EstimatorOptions, fit_fgsm, fit_penalized_likelihood
from fgsmglm.core.glm import (
    CovariateDistribution,
    GaussianIID,
    InverseUniformScaled,
    ModelSpec,
    Shifted,
    UniformBox,
    link_from_name,
    sample_dataset,
)
from fgsmglm.core.penalties import PenaltySpec, penalty_from_config

logger = structlog.get_logger(__name__)

MASK64 = (1 << 64) - 1

TAG_DATASET = 0
TAG_FGSM = 1
TAG_PENALIZED = 2
TAG_LIMIT = 3
TAG_MOMENTS = 4

ESTIMATORS = ("fgsm", "penalized")
MAX_NONCONVERGENCE = 0.02
KS_MIN_SAMPLES = 500

RECORDS_FILE = "records.csv"
LIMIT_DRAWS_FILE = "limit_draws.csv"
CONFIG_SNAPSHOT = "config.json"


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #

class CovariateConfig(BaseModel):
    """Loi des covariables telle qu'écrite dans un fichier de configuration."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["gaussian", "uniform", "shifted", "heavy"] = "gaussian"
    mean: Optional[List[float]] = None
    covariance: Optional[List[List[float]]] = None
    lower: Optional[List[float]] = None
    upper: Optional[List[float]] = None
    shift: Optional[List[float]] = None
    base: Optional["CovariateConfig"] = None
    scale: float = Field(1.0, gt=0)

    def build(self, p: int) -> CovariateDistribution:
        if self.kind == "gaussian":
            mean = self.mean if self.mean is not None else np.zeros(p)
            covariance = self.covariance if self.covariance is not None else np.eye(p)
            return GaussianIID(mean=mean, covariance=covariance)
        if self.kind == "uniform":
            lower = self.lower if self.lower is not None else -np.ones(p)
            upper = self.upper if self.upper is not None else np.ones(p)
            return UniformBox(lower=lower, upper=upper)
        if self.kind == "shifted":
            if self.shift is None:
                raise ConfigError("covariates.shift is required for the shifted kind")
            base = (self.base or CovariateConfig()).build(p)
            return Shifted(base=base, shift=self.shift)
        return InverseUniformScaled(p=p, scale=self.scale)


CovariateConfig.model_rebuild()


class ModelConfig(BaseModel):
    """Famille GLM, β₀ et loi des covariables."""

    model_config = ConfigDict(extra="forbid")

    family: Literal["linear", "logistic"] = "linear"
    sigma: float = Field(1.0, gt=0, description="Écart-type du bruit (famille linear)")
    beta0: List[float] = Field(..., min_length=1)
    covariates: CovariateConfig = Field(default_factory=CovariateConfig)

    def build(self) -> ModelSpec:
        p = len(self.beta0)
        try:
            return ModelSpec(
                link=link_from_name(self.family, self.sigma),
                beta0=np.asarray(self.beta0, dtype=float),
                covariates=self.covariates.build(p),
            )
        except ValueError as e:
            raise ConfigError(f"invalid model configuration: {e}") from e


class PenaltyConfig(BaseModel):
    """Pénalité : famille, λ (λ₀ dans une expérience), γ et a."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    family: Literal["lgamma", "lasso", "scad"] = "lasso"
    lam: float = Field(0.0, ge=0, alias="lambda")
    gamma: Optional[float] = Field(None, gt=0)
    a: Optional[float] = Field(None, gt=2)

    @model_validator(mode="after")
    def _gamma_required(self) -> "PenaltyConfig":
        if self.family == "lgamma" and self.gamma is None:
            raise ValueError("penalty.gamma is required for the lgamma family")
        return self

    def build(self, lam: Optional[float] = None) -> PenaltySpec:
        return penalty_from_config(self.family, self.lam if lam is None else lam, self.gamma, self.a)

    def default_rate_exponent(self) -> float:
        """0.5 pour γ ≥ 1 et SCAD, 1 − γ/2 pour 0 < γ < 1."""
        if self.family == "lgamma" and self.gamma < 1:
            return 1.0 - self.gamma / 2.0
        return 0.5


class ExperimentConfig(BaseModel):
    """Configuration complète d'une expérience (λ_n = λ₀·n^(−rate_exponent))."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig
    penalty: PenaltyConfig = Field(default_factory=PenaltyConfig)
    rate_exponent: Optional[float] = None
    n_grid: List[int] = Field(..., min_length=1)
    replications: int = Field(100, ge=1)
    estimator_options: EstimatorOptions = Field(default_factory=EstimatorOptions)
    limit_draws: int = Field(1000, ge=0)
    master_seed: int = Field(0, ge=0, le=MASK64)
    output_dir: Optional[str] = None
    mc_samples: int = Field(100_000, ge=10_000)
    record_timing: bool = False
    threads: int = Field(1, ge=1, description="Nombre de processus workers pour les réplications")
    frozen_signs: bool = Field(False, description="Gèle sign(e_i) en β₀ dans l'objectif FGSM (analyse de sensibilité)")
    lambda0_grid: Optional[List[float]] = None
    shift_grid: Optional[List[List[float]]] = None

    @field_validator("n_grid")
    @classmethod
    def _ascending(cls, grid: List[int]) -> List[int]:
        if any(n < 1 for n in grid):
            raise ValueError("n_grid entries must be >= 1")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("n_grid must be strictly ascending")
        return grid

    @field_validator("lambda0_grid")
    @classmethod
    def _nonnegative(cls, grid: Optional[List[float]]) -> Optional[List[float]]:
        if grid is not None and any(v < 0 for v in grid):
            raise ValueError("lambda0_grid entries must be >= 0")
        return grid

    @model_validator(mode="after")
    def _rate_consistent(self) -> "ExperimentConfig":
        expected = self.penalty.default_rate_exponent()
        if self.rate_exponent is None:
            self.rate_exponent = expected
        elif abs(self.rate_exponent - expected) > 1e-12:
            raise ValueError(
                f"rate_exponent {self.rate_exponent} is inconsistent with penalty "
                f"{self.penalty.family} (expected {expected})"
            )
        return self

    @property
    def lambda0(self) -> float:
        return self.penalty.lam

    def lambda_n(self, n: int) -> float:
        return self.lambda0 * n ** (-self.rate_exponent)


class ProbeConfig(BaseModel):
    """Sonde des conditions de signe : rayon C, grille de n, taille MC."""

    model_config = ConfigDict(extra="forbid")

    C: float = Field(1.0, gt=0)
    n_grid: List[int] = Field(default_factory=lambda: [100, 1000, 10000, 100000], min_length=2)
    mc_samples: int = Field(100_000, ge=1000)
    directions: int = Field(64, ge=1)


class CommandConfig(BaseModel):
    """Configuration des commandes ponctuelles estimate, perturb et limit."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig
    penalty: PenaltyConfig = Field(default_factory=PenaltyConfig)
    estimator: Literal["fgsm", "penalized", "mle"] = "fgsm"
    estimator_options: EstimatorOptions = Field(default_factory=EstimatorOptions)
    frozen_signs: bool = False
    n: int = Field(200, ge=1, description="Taille simulée quand aucun CSV n'est fourni")
    seed: int = Field(0, ge=0, le=MASK64)
    data: Optional[str] = None
    beta: Optional[List[float]] = None
    mc_samples: int = Field(100_000, ge=10_000)
    limit_draws: int = Field(200, ge=1)
    baseline: bool = False
    rate_grid: Optional[List[int]] = None
    rate_exponent: Optional[float] = None
    probe: Optional[ProbeConfig] = None
    tail_order: Optional[Literal[1, 2]] = None

    @model_validator(mode="after")
    def _rate_default(self) -> "CommandConfig":
        if self.rate_exponent is None:
            self.rate_exponent = self.penalty.default_rate_exponent()
        return self


ConfigT = TypeVar("ConfigT", bound=BaseModel)


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Lit un fichier YAML (.yaml/.yml) ou JSON (.json) en dictionnaire."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    suffix = path.suffix.lower()
    try:
        with open(path, "r", encoding="utf-8") as f:
            if suffix in (".yaml", ".yml"):
                data = yaml.safe_load(f)
            elif suffix == ".json":
                data = json.load(f)
            else:
                raise ConfigError(f"unsupported config format '{suffix}' (expected .yaml, .yml or .json)")
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return data


def load_config(path: Union[str, Path], model_cls: Type[ConfigT] = ExperimentConfig) -> ConfigT:
    """Charge et valide une configuration ; toute erreur devient ConfigError."""
    data = read_config_file(path)
    try:
        config = model_cls.model_validate(data)
    except ValidationError as e:
        logger.error("Invalid configuration", path=str(path), error=str(e))
        raise ConfigError(str(e)) from e
    logger.info("Configuration loaded", path=str(path), kind=model_cls.__name__)
    return config


# --------------------------------------------------------------------------- #
# Graines
# --------------------------------------------------------------------------- #

def _splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, n: int, replication: int, tag: int) -> int:
    """Graine 64 bits dérivée de (master_seed, n, réplication, étiquette) par splitmix64."""
    state = _splitmix64(master_seed & MASK64)
    for part in (n, replication, tag):
        state = _splitmix64(state ^ (part & MASK64))
    return state


# --------------------------------------------------------------------------- #
# Enregistrements
# --------------------------------------------------------------------------- #

@dataclass
class ReplicationRecord:
    """Résultat d'un estimateur pour une réplication (n, rep)."""

    n: int
    replication_index: int
    estimator: str
    beta_hat: np.ndarray
    scaled_error: np.ndarray
    active_set: np.ndarray
    objective_value: float
    converged: bool
    wall_time: float = 0.0

    @classmethod
    def from_estimate(
        cls, n: int, rep: int, estimator: str, result: EstimateResult, beta0: np.ndarray, wall_time: float
    ) -> "ReplicationRecord":
        return cls(
            n=n,
            replication_index=rep,
            estimator=estimator,
            beta_hat=result.beta_hat,
            scaled_error=math.sqrt(n) * (result.beta_hat - beta0),
            active_set=result.active_set,
            objective_value=result.objective_value,
            converged=result.converged,
            wall_time=wall_time,
        )

    @classmethod
    def failed(cls, n: int, rep: int, estimator: str, p: int, wall_time: float) -> "ReplicationRecord":
        nan = np.full(p, np.nan)
        return cls(n, rep, estimator, nan, nan.copy(), np.zeros(p, dtype=bool), math.nan, False, wall_time)

    def to_row(self, record_timing: bool) -> Dict[str, Any]:
        row: Dict[str, Any] = {"n": self.n, "rep": self.replication_index, "estimator": self.estimator}
        for j, value in enumerate(self.beta_hat, start=1):
            row[f"beta_hat_{j}"] = value
        for j, value in enumerate(self.scaled_error, start=1):
            row[f"scaled_err_{j}"] = value
        for j, value in enumerate(self.active_set, start=1):
            row[f"active_{j}"] = int(bool(value))
        row["objective"] = self.objective_value
        row["converged"] = int(self.converged)
        row["wall_ms"] = round(self.wall_time * 1000.0, 3) if record_timing else 0
        return row


def record_columns(p: int) -> List[str]:
    return (
        ["n", "rep", "estimator"]
        + [f"beta_hat_{j}" for j in range(1, p + 1)]
        + [f"scaled_err_{j}" for j in range(1, p + 1)]
        + [f"active_{j}" for j in range(1, p + 1)]
        + ["objective", "converged", "wall_ms"]
    )


def _append_rows(path: Path, rows: List[Dict[str, Any]], columns: List[str]):
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.17g")


def load_records(path: Union[str, Path]) -> pd.DataFrame:
    """Relit records.csv (ou un dossier qui le contient)."""
    path = Path(path)
    if path.is_dir():
        path = path / RECORDS_FILE
    return pd.read_csv(path, float_precision="round_trip")


def load_limit_draws(path: Union[str, Path]) -> pd.DataFrame:
    """Relit limit_draws.csv ; table vide si le fichier est absent."""
    path = Path(path)
    if path.is_dir():
        path = path / LIMIT_DRAWS_FILE
    if not path.exists():
        return pd.DataFrame(columns=["draw", "estimator", "d_value"])
    return pd.read_csv(path, float_precision="round_trip")


def _columns(frame: pd.DataFrame, prefix: str, p: int) -> np.ndarray:
    return frame[[f"{prefix}_{j}" for j in range(1, p + 1)]].to_numpy(dtype=float)


# --------------------------------------------------------------------------- #
# Rapport
# --------------------------------------------------------------------------- #

@dataclass
class ExperimentReport:
    """Statistiques d'une expérience, recalculables à partir des enregistrements."""

    settings: Dict[str, Any]
    per_n: List[Dict[str, Any]]
    ks_statistics: List[Dict[str, Any]]
    consistency_slope: Optional[float]
    baseline_comparison: Dict[str, Any]
    nonconverged: Dict[str, int]
    nonconvergence_rate: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "settings": self.settings,
            "per_n": self.per_n,
            "ks_statistics": self.ks_statistics,
            "consistency_slope": self.consistency_slope,
            "baseline_comparison": self.baseline_comparison,
            "nonconverged": self.nonconverged,
            "nonconvergence_rate": self.nonconvergence_rate,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentReport":
        return cls(**data)

    def summary_for(self, estimator: str) -> List[Dict[str, Any]]:
        return self.per_n if estimator == "fgsm" else self.baseline_comparison["per_n"]

    def ks_for(self, estimator: str) -> List[Dict[str, Any]]:
        return self.ks_statistics if estimator == "fgsm" else self.baseline_comparison["ks_statistics"]


def _optional(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def _per_n_summary(frame: pd.DataFrame, n: int, beta0: np.ndarray) -> Dict[str, Any]:
    p = beta0.shape[0]
    converged = frame[frame["converged"] == 1]
    zero = beta0 == 0.0
    row: Dict[str, Any] = {"n": int(n), "replications": int(len(frame)), "converged": int(len(converged))}

    if converged.empty:
        row.update(median_norm=None, q90_norm=None, zero_recovery=[None] * p,
                   p_zero=None, support_recovery=None, sign_errors=0)
        return row

    norms = np.linalg.norm(_columns(converged, "scaled_err", p), axis=1)
    active = _columns(converged, "active", p).astype(bool)
    beta_hat = _columns(converged, "beta_hat", p)

    row["median_norm"] = float(np.median(norms))
    row["q90_norm"] = float(np.quantile(norms, 0.9))
    row["zero_recovery"] = [float(v) for v in active.mean(axis=0)]
    row["p_zero"] = float(np.all(active[:, zero], axis=1).mean()) if zero.any() else None
    row["support_recovery"] = float(np.all(active == zero, axis=1).mean())
    sign_mismatch = (np.sign(beta_hat) != np.sign(beta0)) & ~zero
    row["sign_errors"] = int(sign_mismatch.sum())
    return row


def _ks_rows(
    frame: pd.DataFrame, draws: pd.DataFrame, n: int, estimator: str, p: int
) -> List[Dict[str, Any]]:
    at_n = frame[frame["n"] == n]
    converged = at_n[at_n["converged"] == 1]
    excluded = int(len(at_n) - len(converged))
    limit = draws[draws["estimator"] == estimator] if not draws.empty else draws

    rows = []
    for j in range(1, p + 1):
        empirical = converged[f"scaled_err_{j}"].to_numpy(dtype=float)
        reference = limit[f"u_star_{j}"].to_numpy(dtype=float) if len(limit) else np.array([])
        row: Dict[str, Any] = {
            "coordinate": j,
            "n": int(n),
            "n_records": int(empirical.size),
            "n_draws": int(reference.size),
            "excluded_nonconverged": excluded,
            "low_power": bool(min(empirical.size, reference.size) < KS_MIN_SAMPLES),
        }
        if empirical.size and reference.size:
            result = ks_2samp(empirical, reference)
            row["statistic"] = float(result.statistic)
            row["pvalue"] = float(result.pvalue)
        else:
            row["statistic"] = None
            row["pvalue"] = None
        rows.append(row)
    return rows


def _consistency_slope(per_n: List[Dict[str, Any]]) -> Optional[float]:
    points = [(r["n"], r["median_norm"]) for r in per_n if r["median_norm"] is not None and r["median_norm"] > 0]
    if len(points) < 2:
        return None
    ns, medians = zip(*points)
    return _optional(np.polyfit(np.log(ns), np.log(medians), 1)[0])


def compute_report(records: pd.DataFrame, limit_draws: pd.DataFrame, config: ExperimentConfig) -> ExperimentReport:
    """Rapport calculé uniquement à partir des enregistrements et des tirages limites."""
    beta0 = np.asarray(config.model.beta0, dtype=float)
    p = beta0.shape[0]
    largest = max(config.n_grid)

    sections: Dict[str, Dict[str, Any]] = {}
    nonconverged: Dict[str, int] = {}
    for estimator in ESTIMATORS:
        frame = records[records["estimator"] == estimator]
        per_n = [_per_n_summary(frame[frame["n"] == n], n, beta0) for n in config.n_grid]
        sections[estimator] = {
            "per_n": per_n,
            "ks_statistics": _ks_rows(frame, limit_draws, largest, estimator, p),
            "consistency_slope": _consistency_slope(per_n),
        }
        nonconverged[estimator] = int((frame["converged"] != 1).sum())

    total = int(len(records))
    rate = float(sum(nonconverged.values()) / total) if total else 0.0
    settings = {
        "family": config.model.family,
        "beta0": beta0.tolist(),
        "penalty": config.penalty.family,
        "lambda0": config.lambda0,
        "rate_exponent": config.rate_exponent,
        "n_grid": list(config.n_grid),
        "replications": config.replications,
        "master_seed": config.master_seed,
    }
    return ExperimentReport(
        settings=settings,
        per_n=sections["fgsm"]["per_n"],
        ks_statistics=sections["fgsm"]["ks_statistics"],
        consistency_slope=sections["fgsm"]["consistency_slope"],
        baseline_comparison=sections["penalized"],
        nonconverged=nonconverged,
        nonconvergence_rate=rate,
    )


# --------------------------------------------------------------------------- #
# Exécution
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class FitEvent:
    """Trace d'un ajustement, rejouée dans les métriques du processus principal."""

    estimator: str
    converged: bool
    duration: float
    error_type: Optional[str] = None


def publish_events(events: Sequence[FitEvent]):
    for event in events:
        if event.error_type is not None:
            metrics.record_error(event.error_type, "estimators")
        metrics.record_fit(event.estimator, event.converged, event.duration)


class ExperimentRunner:
    """Exécute une expérience : réplications, tirages limites, rapport, métriques."""

    def __init__(self, config: ExperimentConfig, output_dir: Union[str, Path], cache: Optional[CacheManager] = None):
        """
        Initialise le runner.

        Args:
            config: Configuration validée
            output_dir: Dossier des enregistrements et du rapport
            cache: Cache des moments (optionnel)
        """
        self.config = config
        self.output_dir = Path(output_dir)
        self.cache = cache
        self.model = config.model.build()
        self.template = config.penalty.build()
        self.beta0 = self.model.beta0
        self.events: List[FitEvent] = []

        logger.info(
            "Experiment runner initialized",
            family=config.model.family,
            penalty=config.penalty.family,
            n_grid=config.n_grid,
            replications=config.replications,
            threads=config.threads,
            frozen_signs=config.frozen_signs,
        )

    def _fit(self, estimator: str, n: int, rep: int, fit) -> ReplicationRecord:
        start = time.perf_counter()
        try:
            result = fit()
        except FgsmGlmError as e:
            elapsed = time.perf_counter() - start
            logger.warning("Estimator failed", estimator=estimator, n=n, rep=rep, error=str(e))
            self.events.append(FitEvent(estimator, False, elapsed, type(e).__name__))
            return ReplicationRecord.failed(n, rep, estimator, self.model.p, elapsed)
        elapsed = time.perf_counter() - start
        self.events.append(FitEvent(estimator, result.converged, elapsed))
        return ReplicationRecord.from_estimate(n, rep, estimator, result, self.beta0, elapsed)

    def run_replication(self, n: int, rep: int) -> List[ReplicationRecord]:
        """Un jeu de données, puis les deux estimateurs sur la même boule."""
        seed = self.config.master_seed
        dataset = sample_dataset(self.model, n, derive_seed(seed, n, rep, TAG_DATASET))
        penalty = self.template.with_lambda(self.config.lambda_n(n))
        options = self.config.estimator_options

        fgsm_options = options.model_copy(update={"seed": derive_seed(seed, n, rep, TAG_FGSM)})
        penalized_options = options.model_copy(update={"seed": derive_seed(seed, n, rep, TAG_PENALIZED)})
        objective = AdversarialObjective(dataset, self.model.link, penalty)
        if self.config.frozen_signs:
            objective = objective.freeze_signs(self.beta0)

        return [
            self._fit("fgsm", n, rep, lambda: fit_fgsm(objective, self.beta0, fgsm_options)),
            self._fit(
                "penalized",
                n,
                rep,
                lambda: fit_penalized_likelihood(dataset, self.model.link, penalty, self.beta0, penalized_options),
            ),
        ]

    def run_shard(self, shard: int, tasks: List[tuple], parts_dir: Path) -> List[FitEvent]:
        """Écrit records.part-<shard>.csv pour une part des (n, rep)."""
        path = parts_dir / f"records.part-{shard}.csv"
        columns = record_columns(self.model.p)
        for n, rep in tasks:
            rows = [r.to_row(self.config.record_timing) for r in self.run_replication(n, rep)]
            _append_rows(path, rows, columns)
        return self.events

    def run_replications(self) -> pd.DataFrame:
        """Répartit les (n, rep) entre les processus puis fusionne par tri (n, rep, estimateur)."""
        tasks = [(n, rep) for n in self.config.n_grid for rep in range(self.config.replications)]
        workers = self.config.threads
        parts_dir = self.output_dir / "parts"
        if parts_dir.exists():
            shutil.rmtree(parts_dir)
        parts_dir.mkdir(parents=True)

        shards = [tasks[k::workers] for k in range(workers)]
        if workers == 1:
            events = self.run_shard(0, tasks, parts_dir)
        else:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                futures = [
                    executor.submit(_run_shard, self.config, k, shards[k], parts_dir) for k in range(workers)
                ]
                events = [event for future in futures for event in future.result()]
        publish_events(events)
        for n, _ in tasks:
            metrics.record_replication(n)

        frames = [
            pd.read_csv(path, float_precision="round_trip") for path in sorted(parts_dir.glob("records.part-*.csv"))
        ]
        records = pd.concat(frames, ignore_index=True)
        records = records.sort_values(["n", "rep", "estimator"], kind="mergesort").reset_index(drop=True)
        records = records[record_columns(self.model.p)]
        records.to_csv(self.output_dir / RECORDS_FILE, index=False, float_format="%.17g")
        shutil.rmtree(parts_dir)

        logger.info("Replications completed", records=len(records), tasks=len(tasks), workers=workers)
        return load_records(self.output_dir / RECORDS_FILE)

    def limit_problem(self) -> LimitProblem:
        moments = compute_moments(
            self.model,
            self.config.mc_samples,
            derive_seed(self.config.master_seed, 0, 0, TAG_MOMENTS),
            cache=self.cache,
        )
        return LimitProblem(
            moments=moments,
            penalty_case=PenaltyCase.from_penalty(self.template),
            lambda0=self.config.lambda0,
            beta0=self.beta0,
            radius_K=self.config.estimator_options.ball_radius_K,
        )

    def run_limit_draws(self) -> pd.DataFrame:
        """Tirages de argmax D (fgsm) et de argmax D̃ (penalized) sur les mêmes W."""
        p = self.model.p
        columns = ["draw", "estimator"] + [f"u_star_{j}" for j in range(1, p + 1)] + ["d_value"]
        rows = []
        if self.config.limit_draws > 0:
            problem = self.limit_problem()
            seed = derive_seed(self.config.master_seed, 0, 0, TAG_LIMIT)
            for estimator, target in (("fgsm", problem), ("penalized", problem.as_baseline())):
                for index, draw in enumerate(sample_limit_draws(target, self.config.limit_draws, seed)):
                    row = {"draw": index, "estimator": estimator, "d_value": draw.d_value}
                    row.update({f"u_star_{j}": v for j, v in enumerate(draw.u_star, start=1)})
                    rows.append(row)

        frame = pd.DataFrame(rows, columns=columns)
        frame.to_csv(self.output_dir / LIMIT_DRAWS_FILE, index=False, float_format="%.17g")
        return load_limit_draws(self.output_dir / LIMIT_DRAWS_FILE)

    def run(self) -> ExperimentReport:
        """Exécute l'expérience complète et persiste records, tirages, rapport et métriques."""
        from fgsmglm.core.report_generator import emit_report

        start = time.time()
        self.output_dir.mkdir(parents=True, exist_ok=True)
        with open(self.output_dir / CONFIG_SNAPSHOT, "w", encoding="utf-8") as f:
            json.dump(self.config.model_dump(mode="json", by_alias=True), f, indent=2)

        records = self.run_replications()
        draws = self.run_limit_draws()
        report = compute_report(records, draws, self.config)
        emit_report(report, "json", self.output_dir)

        metrics.update_nonconvergence_rate(report.nonconvergence_rate)
        metrics.write_metrics(self.output_dir)

        logger.info(
            "Experiment completed",
            output_dir=str(self.output_dir),
            consistency_slope=report.consistency_slope,
            nonconvergence_rate=report.nonconvergence_rate,
            elapsed=round(time.time() - start, 2),
        )
        if report.nonconvergence_rate > MAX_NONCONVERGENCE:
            logger.error("Too many non-converged fits", rate=report.nonconvergence_rate)
            raise ExperimentError(
                f"non-convergence rate {report.nonconvergence_rate:.3%} exceeds {MAX_NONCONVERGENCE:.0%}"
            )
        return report


def _run_shard(config: ExperimentConfig, shard: int, tasks: List[tuple], parts_dir: Path) -> List[FitEvent]:
    """Point d'entrée d'un processus worker : un runner neuf par part."""
    return ExperimentRunner(config, parts_dir.parent).run_shard(shard, tasks, parts_dir)


def run_experiment(
    config: ExperimentConfig, output_dir: Union[str, Path, None] = None, cache: Optional[CacheManager] = None
) -> ExperimentReport:
    """Réplications Monte Carlo, tirages limites et rapport (voir ExperimentRunner)."""
    target = output_dir or config.output_dir or "./runs"
    return ExperimentRunner(config, target, cache=cache).run()


def report_from_directory(directory: Union[str, Path], config: Optional[ExperimentConfig] = None) -> ExperimentReport:
    """Recalcule le rapport depuis records.csv et limit_draws.csv d'un dossier de sortie."""
    directory = Path(directory)
    if config is None:
        config = load_config(directory / CONFIG_SNAPSHOT)
    return compute_report(load_records(directory), load_limit_draws(directory), config)


# --------------------------------------------------------------------------- #
# Études
# --------------------------------------------------------------------------- #

def binomial_se(p: float, n: int) -> float:
    """Erreur standard binomiale √(p(1−p)/n)."""
    if n <= 0:
        return math.nan
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def is_monotone(rows: pd.DataFrame, value: str = "p_zero", se: str = "p_zero_se", n_se: float = 2.0) -> bool:
    """Vrai si la colonne est croissante à n_se erreurs standard près, pas à pas."""
    values = rows[value].to_numpy(dtype=float)
    errors = rows[se].to_numpy(dtype=float)
    for i in range(len(values) - 1):
        slack = n_se * math.sqrt(errors[i] ** 2 + errors[i + 1] ** 2)
        if values[i + 1] < values[i] - slack:
            return False
    return True


def oracle_study(
    config: ExperimentConfig,
    lambda0_grid: Sequence[float],
    output_dir: Union[str, Path, None] = None,
    cache: Optional[CacheManager] = None,
) -> pd.DataFrame:
    """
    Probabilités empiriques P{β̂₂ = 0} et P{support exact} à la plus grande
    taille n, pour chaque λ₀ de la grille.
    """
    beta0 = np.asarray(config.model.beta0, dtype=float)
    if not ((beta0 == 0).any() and (beta0 != 0).any()):
        raise ConfigError("oracle study needs beta0 with at least one zero and one nonzero component")
    base_dir = Path(output_dir or config.output_dir or "./runs")
    largest = max(config.n_grid)

    rows = []
    for lambda0 in lambda0_grid:
        penalty = config.penalty.model_copy(update={"lam": float(lambda0)})
        run_config = config.model_copy(update={"penalty": penalty, "n_grid": [largest], "limit_draws": 0})
        report = run_experiment(run_config, base_dir / f"lambda0_{lambda0:g}", cache=cache)
        summary = report.per_n[-1]
        count = summary["converged"]
        p_zero = summary["p_zero"] or 0.0
        support = summary["support_recovery"] or 0.0
        rows.append(
            {
                "lambda0": float(lambda0),
                "p_zero": p_zero,
                "p_zero_se": binomial_se(p_zero, count),
                "support_recovery": support,
                "support_se": binomial_se(support, count),
                "replications": count,
            }
        )
        logger.info("Oracle point completed", lambda0=lambda0, p_zero=p_zero, support_recovery=support)

    return pd.DataFrame(rows, columns=["lambda0", "p_zero", "p_zero_se", "support_recovery", "support_se", "replications"])


@dataclass
class SignNeutralityStudy:
    rows: pd.DataFrame
    correlation: Optional[float]
    predictions: List[List[float]] = field(default_factory=list)


def _cosine(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    return float(a @ b) / denom if denom > 0 else None


def sign_neutrality_study(
    model: ModelConfig,
    shift_grid: Sequence[Sequence[float]],
    config: ExperimentConfig,
    output_dir: Union[str, Path, None] = None,
    cache: Optional[CacheManager] = None,
) -> SignNeutralityStudy:
    """
    Pour chaque translation des covariables : ‖V‖, biais moyen de √n(β̂ − β₀)
    par rapport à la limite sans terme en V, et prédiction λ₀‖β₀‖_γ^γ M⁻¹V.
    """
    if model.family != "logistic":
        logger.warning("Sign neutrality study on a non-logistic model", family=model.family)
    base_dir = Path(output_dir or config.output_dir or "./runs")
    largest = max(config.n_grid)
    p = len(model.beta0)
    draws = max(config.limit_draws, 200)

    rows, predictions = [], []
    for index, shift in enumerate(shift_grid):
        covariates = CovariateConfig(kind="shifted", base=model.covariates, shift=list(shift))
        shifted = model.model_copy(update={"covariates": covariates})
        run_config = config.model_copy(update={"model": shifted, "n_grid": [largest], "limit_draws": 0})
        runner = ExperimentRunner(run_config, base_dir / f"shift_{index}", cache=cache)
        runner.run()

        records = load_records(runner.output_dir)
        fgsm = records[(records["estimator"] == "fgsm") & (records["converged"] == 1)]
        scaled = _columns(fgsm, "scaled_err", p)
        mean_error = scaled.mean(axis=0) if len(scaled) else np.full(p, np.nan)

        problem = runner.limit_problem()
        neutral = replace(problem.moments, V=np.zeros(p))
        reference = LimitProblem(neutral, problem.penalty_case, problem.lambda0, problem.beta0, problem.radius_K)
        limit_mean = np.mean(
            [d.u_star for d in sample_limit_draws(reference, draws, derive_seed(config.master_seed, 0, index, TAG_LIMIT))],
            axis=0,
        )
        bias = mean_error - limit_mean

        norm_gamma = float(np.sum(np.abs(problem.beta0) ** problem.gamma))
        if problem.penalty_case.has_bias_term:
            prediction = problem.lambda0 * norm_gamma * np.linalg.solve(problem.moments.M, problem.moments.V)
        else:
            prediction = np.zeros(p)
        predictions.append(prediction.tolist())

        se = scaled.std(axis=0, ddof=1) / math.sqrt(len(scaled)) if len(scaled) > 1 else np.full(p, np.nan)
        rows.append(
            {
                "shift": json.dumps([float(v) for v in shift]),
                "v_norm": float(np.linalg.norm(problem.moments.V)),
                "v_se_max": float(np.max(problem.moments.V_se)),
                "bias_norm": float(np.linalg.norm(bias)),
                "bias_se_max": float(np.max(se)),
                "cosine": _cosine(bias, prediction),
                "replications": int(len(scaled)),
            }
        )
        logger.info("Sign neutrality point completed", shift=list(shift), v_norm=rows[-1]["v_norm"])

    frame = pd.DataFrame(rows)
    correlation = None
    if len(frame) >= 2 and frame["v_norm"].std() > 0 and frame["bias_norm"].std() > 0:
        correlation = float(np.corrcoef(frame["v_norm"], frame["bias_norm"])[0, 1])
    return SignNeutralityStudy(rows=frame, correlation=correlation, predictions=predictions)
