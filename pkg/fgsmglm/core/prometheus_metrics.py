"""
Collecteur de métriques Prometheus pour les exécutions d'expériences.

Pas de serveur : les métriques sont écrites au format texte dans metrics.prom.
"""

from pathlib import Path
from typing import Union

import structlog
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, Info, generate_latest

from fgsmglm import __version__

logger = structlog.get_logger(__name__)

# Registry personnalisé
registry = CollectorRegistry()

fits_total = Counter(
    "fgsmglm_fits_total",
    "Nombre total d'ajustements",
    ["estimator", "converged"],
    registry=registry,
)

fit_duration = Histogram(
    "fgsmglm_fit_duration_seconds",
    "Durée d'un ajustement en secondes",
    ["estimator"],
    buckets=(0.001, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 30.0),
    registry=registry,
)

replications_total = Counter(
    "fgsmglm_replications_total",
    "Nombre total de réplications Monte Carlo",
    ["n"],
    registry=registry,
)

errors_total = Counter(
    "fgsmglm_errors_total",
    "Nombre total d'erreurs",
    ["error_type", "component"],
    registry=registry,
)

nonconvergence_rate = Gauge(
    "fgsmglm_nonconvergence_rate",
    "Proportion d'ajustements non convergés dans la dernière expérience",
    registry=registry,
)

system_info = Info(
    "fgsmglm",
    "Informations sur le harnais d'expériences",
    registry=registry,
)

system_info.info({"version": __version__, "framework": "numpy + scipy"})


def record_fit(estimator: str, converged: bool, duration: float):
    """Enregistre un ajustement."""
    fits_total.labels(estimator=estimator, converged=str(bool(converged)).lower()).inc()
    fit_duration.labels(estimator=estimator).observe(duration)


def record_replication(n: int):
    replications_total.labels(n=str(n)).inc()


def record_error(error_type: str, component: str):
    """Enregistre une erreur."""
    errors_total.labels(error_type=error_type, component=component).inc()


def update_nonconvergence_rate(rate: float):
    nonconvergence_rate.set(rate)


def get_metrics() -> bytes:
    """Retourne les métriques au format d'exposition Prometheus."""
    return generate_latest(registry)


def write_metrics(out_dir: Union[str, Path]) -> Path:
    """Écrit metrics.prom dans out_dir."""
    path = Path(out_dir) / "metrics.prom"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(get_metrics())
    logger.debug("Metrics written", path=str(path))
    return path
