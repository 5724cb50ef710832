"""
Estimateurs : Generalized FGSM contraint à la boule ‖β − β₀‖ ≤ K/√n,
vraisemblance pénalisée Q̃_n (référence de comparaison) et MLE non pénalisé.

La recherche est une montée projetée multi-départs, à pas mis à l'échelle par
la courbure X^T diag(b'') X avec rebroussement d'Armijo, puis un polissage qui
met à zéro les petites composantes quand l'objectif ne baisse pas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.optimize import brentq

from fgsmglm.core.adversarial import AdversarialObjective, objective, subgradient
from fgsmglm.core.errors import NonConvergenceError, NonFiniteObjectiveError, RankDeficiencyError
from fgsmglm.core.glm import Dataset, LinearGaussian, LinkFamily, Logistic, check_beta, loglik
from fgsmglm.core.penalties import PenaltySpec, penalty_value

logger = structlog.get_logger(__name__)

INITIAL_STEP = 1.0
SHRINK = 0.5
ARMIJO_C = 1e-4
MIN_STEP = 1e-14
CURVATURE_FLOOR = 1e-10

MLE_GRADIENT_TOL = 1e-8
MLE_MAX_ITERATIONS = 100

ObjectiveFn = Callable[[np.ndarray], float]
GradientFn = Callable[[np.ndarray], np.ndarray]
CurvatureFn = Callable[[np.ndarray], np.ndarray]


class EstimatorOptions(BaseModel):
    """Options de la recherche locale (K, nombre de départs, tolérances, graine)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    ball_radius_K: float = Field(10.0, gt=0, description="Rayon K de la boule K/√n autour de β₀")
    restarts: int = Field(8, ge=1)
    max_iterations: int = Field(500, ge=1)
    step_tolerance: float = Field(
        1e-10,
        gt=0,
        description="Arrêt quand le pas du modèle quadratique ou le déplacement accepté passe sous step_tolerance·(1 + ‖β‖)",
    )
    objective_tolerance: float = Field(
        1e-10, gt=0, description="Baisse de l'objectif tolérée quand le polissage met une composante à zéro"
    )
    seed: int = Field(0, ge=0, lt=2**64)
    polish_threshold: Optional[float] = Field(
        None,
        gt=0,
        description=(
            "Fenêtre de polissage : les composantes |β_j| < seuil sont candidates à la mise à zéro. "
            "Par défaut le rayon K/√n, bien plus large que zero_threshold ; une mise à zéro n'est "
            "gardée que si l'objectif ne baisse pas de plus de objective_tolerance"
        ),
    )


@dataclass
class EstimateResult:
    """Résultat d'un ajustement, avec diagnostics de convergence et départ gagnant."""

    beta_hat: np.ndarray
    objective_value: float
    converged: bool
    iterations_used: int
    active_set: np.ndarray
    restart_index: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "objective": self.objective_value,
            "converged": self.converged,
            "active_set": self.active_set.tolist(),
            "iterations": self.iterations_used,
            "restart_index": self.restart_index,
        }


@dataclass
class _AscentRun:
    beta: np.ndarray
    value: float
    converged: bool
    iterations: int


def zero_threshold(beta0: np.ndarray) -> float:
    """Seuil sous lequel |β̂_j| est déclaré nul : 1e-6·(1 + ‖β₀‖∞)."""
    beta0 = np.asarray(beta0, dtype=float)
    scale = float(np.max(np.abs(beta0))) if beta0.size else 0.0
    return 1e-6 * (1.0 + scale)


def _project(beta: np.ndarray, center: np.ndarray, radius: float, free: np.ndarray) -> np.ndarray:
    """Projection sur la boule, composantes hors de `free` maintenues à 0."""
    out = np.array(beta, dtype=float)
    out[~free] = 0.0
    fixed_sq = float(np.sum(center[~free] ** 2))
    free_radius = math.sqrt(max(radius * radius - fixed_sq, 0.0))
    d = out[free] - center[free]
    norm = float(np.linalg.norm(d))
    if norm > free_radius:
        out[free] = center[free] + d * (free_radius / norm) if norm > 0 else center[free]
    return out


def _evaluate(f: ObjectiveFn, beta: np.ndarray) -> float:
    value = f(beta)
    if not np.isfinite(value):
        raise NonFiniteObjectiveError(f"objective is not finite at beta={beta.tolist()}", beta)
    return value


def _stop_tolerance(value: float, opts: EstimatorOptions) -> float:
    # l'arrondi sur une somme de n termes dépasse objective_tolerance quand |Q| est grand
    return max(opts.objective_tolerance, 1e-14 * abs(value))


def _information(dataset: Dataset, link: LinkFamily) -> CurvatureFn:
    """Courbure de référence β ↦ X^T diag(b''(Xβ)) X, partagée par les deux objectifs."""
    x = dataset.x

    def hess(beta: np.ndarray) -> np.ndarray:
        weights = np.broadcast_to(link.b2(x @ beta), (dataset.n,))
        return x.T @ (weights[:, None] * x)

    return hess


def _scaled_direction(
    g: np.ndarray,
    hess: np.ndarray,
    beta: np.ndarray,
    center: np.ndarray,
    radius: float,
    free: np.ndarray,
) -> np.ndarray:
    """
    Pas d = argmax g^T d − ½ d^T H d sous ‖β + d − centre‖ ≤ r, composantes libres seulement.

    Sur la boule, u = β + d − centre vaut (H + μI)^{-1}(g + H(β − centre)) avec μ ≥ 0
    obtenu par brentq pour que ‖u‖ = r quand la contrainte est active.
    """
    d = np.zeros_like(beta)
    if not np.any(free):
        return d
    fixed_sq = float(np.sum(center[~free] ** 2))
    free_radius = math.sqrt(max(radius * radius - fixed_sq, 0.0))
    offset = beta[free] - center[free]
    if free_radius == 0.0:
        d[free] = -offset
        return d

    h = hess[np.ix_(free, free)]
    eigenvalues, basis = linalg.eigh(h)
    floor = CURVATURE_FLOOR * max(1.0, float(eigenvalues[-1]))
    eigenvalues = np.maximum(eigenvalues, floor)
    rhs = g[free] + h @ offset
    coef = basis.T @ rhs

    def norm_at(mu: float) -> float:
        return float(np.linalg.norm(coef / (eigenvalues + mu)))

    mu = 0.0
    if norm_at(0.0) > free_radius:
        upper = float(np.linalg.norm(rhs)) / free_radius
        mu = brentq(lambda m: norm_at(m) - free_radius, 0.0, upper, xtol=1e-14 * max(1.0, upper))
    u = basis @ (coef / (eigenvalues + mu))
    norm = float(np.linalg.norm(u))
    if norm > free_radius:
        u *= free_radius / norm
    d[free] = u - offset
    return d


def _line_search(
    f: ObjectiveFn, g: np.ndarray, beta: np.ndarray, value: float, direction: np.ndarray
) -> Optional[Tuple[np.ndarray, float]]:
    """Rebroussement d'Armijo sur β + τ·d, τ = 1, 1/2, ... ; None si aucun τ ne monte."""
    slope = float(g @ direction)
    if not slope > 0.0:
        return None
    step = INITIAL_STEP
    while step >= MIN_STEP:
        candidate = beta + step * direction
        candidate_value = _evaluate(f, candidate)
        if candidate_value >= value + ARMIJO_C * step * slope:
            return candidate, candidate_value
        step *= SHRINK
    return None


def _ascend(
    f: ObjectiveFn,
    grad: GradientFn,
    hess: CurvatureFn,
    start: np.ndarray,
    center: np.ndarray,
    radius: float,
    opts: EstimatorOptions,
    free: np.ndarray,
) -> _AscentRun:
    """
    Montée projetée à pas mis à l'échelle par la courbure, composantes libres seulement.

    La direction maximise le modèle quadratique sur la boule ; si Armijo la refuse,
    on essaie le pas de gradient projeté de longueur 1/‖H‖. Arrêt quand le pas du
    modèle ou le déplacement accepté tombe sous step_tolerance·(1 + ‖β‖), ou
    quand aucune des deux directions ne fait plus monter l'objectif.
    """
    beta = _project(start, center, radius, free)
    value = _evaluate(f, beta)

    for iteration in range(1, opts.max_iterations + 1):
        g = np.array(grad(beta), dtype=float)
        if not np.all(np.isfinite(g)):
            raise NonFiniteObjectiveError(f"gradient is not finite at beta={beta.tolist()}", beta)
        g[~free] = 0.0
        tol = opts.step_tolerance * (1.0 + float(np.linalg.norm(beta)))

        curvature = np.asarray(hess(beta), dtype=float)
        direction = _scaled_direction(g, curvature, beta, center, radius, free)
        if float(np.linalg.norm(direction)) <= tol:
            return _AscentRun(beta, value, True, iteration)

        accepted = _line_search(f, g, beta, value, direction)
        if accepted is None:
            lipschitz = max(float(np.linalg.norm(curvature, 2)), CURVATURE_FLOOR)
            gradient_step = _project(beta + g / lipschitz, center, radius, free) - beta
            accepted = _line_search(f, g, beta, value, gradient_step)
        if accepted is None:
            # plus aucune direction de montée à la résolution du pas
            return _AscentRun(beta, value, True, iteration)

        candidate, candidate_value = accepted
        move = float(np.linalg.norm(candidate - beta))
        beta, value = candidate, candidate_value
        if move <= tol:
            return _AscentRun(beta, value, True, iteration)

    return _AscentRun(beta, value, False, opts.max_iterations)


def _polish(
    f: ObjectiveFn,
    grad: GradientFn,
    hess: CurvatureFn,
    run: _AscentRun,
    center: np.ndarray,
    radius: float,
    opts: EstimatorOptions,
    threshold: float,
) -> _AscentRun:
    """Met à zéro, dans l'ordre des indices, les petites composantes qui ne coûtent rien."""
    beta, value = run.beta.copy(), run.value
    free = np.ones(beta.shape[0], dtype=bool)
    tol = _stop_tolerance(value, opts)

    for j in range(beta.shape[0]):
        if beta[j] == 0.0 or abs(beta[j]) >= threshold:
            continue
        candidate = beta.copy()
        candidate[j] = 0.0
        if np.linalg.norm(candidate - center) > radius:
            continue
        candidate_value = _evaluate(f, candidate)
        if candidate_value >= value - tol:
            beta, value = candidate, candidate_value
            free[j] = False

    if free.all():
        return _AscentRun(beta, value, run.converged, run.iterations)

    refit = _ascend(f, grad, hess, beta, center, radius, opts, free)
    if refit.value < value:
        refit = _AscentRun(beta, value, refit.converged, refit.iterations)
    return _AscentRun(refit.beta, refit.value, run.converged and refit.converged, run.iterations + refit.iterations)


def _starting_points(beta0: np.ndarray, radius: float, opts: EstimatorOptions) -> List[np.ndarray]:
    """β₀ puis des tirages uniformes dans la boule, à partir de opts.seed."""
    rng = np.random.default_rng(opts.seed)
    p = beta0.shape[0]
    starts = [beta0.copy()]
    for _ in range(opts.restarts - 1):
        direction = rng.standard_normal(p)
        norm = float(np.linalg.norm(direction))
        if norm == 0.0:
            starts.append(beta0.copy())
            continue
        r = radius * rng.random() ** (1.0 / p)
        starts.append(beta0 + direction * (r / norm))
    return starts


def _maximize(
    f: ObjectiveFn,
    grad: GradientFn,
    hess: CurvatureFn,
    beta0: np.ndarray,
    n: int,
    opts: EstimatorOptions,
    label: str,
) -> EstimateResult:
    radius = opts.ball_radius_K / math.sqrt(max(n, 1))
    threshold = opts.polish_threshold if opts.polish_threshold is not None else radius
    free = np.ones(beta0.shape[0], dtype=bool)

    best: Optional[_AscentRun] = None
    best_index = 0
    for index, start in enumerate(_starting_points(beta0, radius, opts)):
        run = _ascend(f, grad, hess, start, beta0, radius, opts, free)
        run = _polish(f, grad, hess, run, beta0, radius, opts, threshold)
        logger.debug(
            "Restart finished",
            estimator=label,
            restart=index,
            objective=run.value,
            converged=run.converged,
            iterations=run.iterations,
        )
        # égalité : on garde le plus petit indice de départ
        if best is None or run.value > best.value:
            best, best_index = run, index

    beta_hat = best.beta
    return EstimateResult(
        beta_hat=beta_hat,
        objective_value=_evaluate(f, beta_hat),
        converged=best.converged,
        iterations_used=best.iterations,
        active_set=np.abs(beta_hat) <= zero_threshold(beta0),
        restart_index=best_index,
    )


def fit_fgsm(obj: AdversarialObjective, beta0, opts: EstimatorOptions) -> EstimateResult:
    """
    Estimateur Generalized FGSM : meilleur maximiseur local de Q_n sur la boule
    fermée de rayon K/√n centrée en β₀.
    """
    beta0 = check_beta(obj.dataset, beta0)
    return _maximize(
        lambda beta: objective(obj, beta),
        lambda beta: subgradient(obj, beta),
        _information(obj.dataset, obj.link),
        beta0,
        obj.dataset.n,
        opts,
        "fgsm",
    )


def fit_penalized_likelihood(
    dataset: Dataset, link: LinkFamily, penalty: PenaltySpec, beta0, opts: EstimatorOptions
) -> EstimateResult:
    """Même recherche appliquée à Q̃_n(β) = Σ[y_i x_i^T β − b(x_i^T β)] − n p_λ(β)."""
    beta0 = check_beta(dataset, beta0)
    n = dataset.n

    def f(beta: np.ndarray) -> float:
        return loglik(dataset, beta, link) - n * penalty_value(penalty, beta)

    def grad(beta: np.ndarray) -> np.ndarray:
        theta = dataset.x @ beta
        return dataset.x.T @ (dataset.y - link.b1(theta)) - n * penalty.derivative(beta)

    return _maximize(f, grad, _information(dataset, link), beta0, n, opts, "penalized")


def fit_mle(dataset: Dataset, link: LinkFamily) -> EstimateResult:
    """
    MLE non pénalisé : moindres carrés exacts (LinearGaussian) ou scoring de
    Fisher / IRLS jusqu'à ‖∇‖ ≤ 1e-8 (Logistic).

    Raises:
        RankDeficiencyError: design de rang colonne incomplet
        NonConvergenceError: budget d'itérations épuisé ou séparation complète
    """
    x, y = dataset.x, dataset.y
    if dataset.n == 0 or np.linalg.matrix_rank(x) < dataset.p:
        raise RankDeficiencyError(f"design matrix does not have full column rank p={dataset.p}")

    if isinstance(link, LinearGaussian):
        beta, _, _, _ = linalg.lstsq(x, y)
        return _mle_result(dataset, link, beta, iterations=1)

    if not isinstance(link, Logistic):
        raise TypeError(f"unsupported link family {type(link).__name__}")

    beta = np.zeros(dataset.p)
    value = loglik(dataset, beta, link)
    for iteration in range(1, MLE_MAX_ITERATIONS + 1):
        theta = x @ beta
        gradient = x.T @ (y - link.b1(theta))
        if np.linalg.norm(gradient) <= MLE_GRADIENT_TOL:
            fitted = link.b1(theta)
            if np.all((fitted < 1e-10) | (fitted > 1.0 - 1e-10)):
                raise NonConvergenceError("logistic data are completely separated", iterations=iteration)
            return _mle_result(dataset, link, beta, iterations=iteration)

        information = x.T @ (link.b2(theta)[:, None] * x)
        try:
            delta = linalg.solve(information, gradient, assume_a="pos")
        except linalg.LinAlgError as e:
            raise NonConvergenceError(f"Fisher information became singular: {e}", iterations=iteration) from e

        # demi-pas tant que la log-vraisemblance baisse
        scale = 1.0
        candidate = beta + delta
        candidate_value = loglik(dataset, candidate, link)
        while candidate_value < value and scale > MIN_STEP:
            scale *= SHRINK
            candidate = beta + scale * delta
            candidate_value = loglik(dataset, candidate, link)
        beta, value = candidate, candidate_value

    logger.warning("Logistic MLE did not converge", iterations=MLE_MAX_ITERATIONS, n=dataset.n)
    raise NonConvergenceError(
        f"IRLS did not reach gradient norm {MLE_GRADIENT_TOL} in {MLE_MAX_ITERATIONS} iterations",
        iterations=MLE_MAX_ITERATIONS,
    )


def _mle_result(dataset: Dataset, link: LinkFamily, beta: np.ndarray, iterations: int) -> EstimateResult:
    beta = np.asarray(beta, dtype=float)
    return EstimateResult(
        beta_hat=beta,
        objective_value=loglik(dataset, beta, link),
        converged=True,
        iterations_used=iterations,
        active_set=np.abs(beta) <= zero_threshold(np.zeros_like(beta)),
        restart_index=0,
    )
