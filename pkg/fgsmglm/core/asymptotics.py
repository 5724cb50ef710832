"""
Quantités asymptotiques : moments de population (M, V, E|ε|), objectif limite D(u)
et son argmax, limite oracle, contrôles de vitesse et sondes des conditions
de régularité (signes des erreurs, queues des covariables).

Forme commune des quatre cas de pénalité :

    D(u) = (W + s)^T u − ½ u^T M u − κ Σ_{j : β₀j = 0} |u_j|^q

où le décalage s, le poids κ et l'exposant q dépendent de la pénalité.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from scipy import linalg
from scipy.optimize import brentq
from scipy.stats import norm, qmc

from fgsmglm.core.cache_manager import CacheManager
from fgsmglm.core.errors import NonConvergenceError, ShapeMismatchError, SingularMatrixError
from fgsmglm.core.glm import LinearGaussian, ModelSpec, check_seed
from fgsmglm.core.penalties import LGamma, Lasso, PenaltySpec, Scad, penalty_derivative

logger = structlog.get_logger(__name__)

MIN_MOMENT_SAMPLES = 10_000
MOMENT_CHUNK = 50_000

COORDINATE_TOL = 1e-12
MAX_SWEEPS = 10_000
BISECTION_STEPS = 200
GRID_POINTS_PER_AXIS = 5
MAX_GRID_DIM = 3

TIE_TOL = 1e-10
MULTIMODAL_VALUE_TOL = 1e-8
MULTIMODAL_LOCATION_TOL = 1e-3

RATE_PASS_SLOPE = -0.45
TAIL_STABILITY = 0.20


# --------------------------------------------------------------------------- #
# Moments de population
# --------------------------------------------------------------------------- #

@dataclass
class MomentSummary:
    """
    Estimations Monte Carlo de M = E b″(x^Tβ₀) x x^T, V = E[b″ sign(ε) x] et E|ε|,
    avec erreurs standard par entrée.
    """

    M: np.ndarray
    V: np.ndarray
    mean_abs_eps: float
    mc_samples: int
    M_se: np.ndarray
    V_se: np.ndarray
    mean_abs_eps_se: float
    score_covariance: np.ndarray
    V_analytic: Optional[np.ndarray] = None
    mean_abs_eps_analytic: Optional[float] = None

    @property
    def p(self) -> int:
        return self.V.shape[0]

    @property
    def mc_standard_errors(self) -> Dict[str, Any]:
        return {"M": self.M_se, "V": self.V_se, "mean_abs_eps": self.mean_abs_eps_se}

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "M": self.M.tolist(),
            "V": self.V.tolist(),
            "mean_abs_eps": self.mean_abs_eps,
            "mc_samples": self.mc_samples,
            "mc_standard_errors": {
                "M": self.M_se.tolist(),
                "V": self.V_se.tolist(),
                "mean_abs_eps": self.mean_abs_eps_se,
            },
            "score_covariance": self.score_covariance.tolist(),
        }
        if self.V_analytic is not None:
            data["V_analytic"] = self.V_analytic.tolist()
            data["mean_abs_eps_analytic"] = self.mean_abs_eps_analytic
        return data


def _mean_and_se(total: np.ndarray, total_sq: np.ndarray, count: int) -> Tuple[np.ndarray, np.ndarray]:
    mean = total / count
    variance = np.maximum(total_sq / count - mean * mean, 0.0)
    return mean, np.sqrt(variance / count)


def _compute_moments(model: ModelSpec, mc_samples: int, seed: int) -> MomentSummary:
    p = model.p
    sums = {
        "M": np.zeros((p, p)),
        "M2": np.zeros((p, p)),
        "V": np.zeros(p),
        "V2": np.zeros(p),
        "S": np.zeros((p, p)),
    }
    abs_sum = abs_sq = 0.0

    # sous-flux indépendants (seed, k), accumulés dans l'ordre de k
    for stream, start in enumerate(range(0, mc_samples, MOMENT_CHUNK)):
        size = min(MOMENT_CHUNK, mc_samples - start)
        rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
        x = model.covariates.sample(size, rng)
        theta = x @ model.beta0
        y = model.link.sample_response(theta, rng)
        eps = y - model.link.b1(theta)
        weight = model.link.b2(theta)

        outer = x[:, :, None] * x[:, None, :]
        weighted = weight[:, None, None] * outer
        sums["M"] += weighted.sum(axis=0)
        sums["M2"] += (weighted * weighted).sum(axis=0)
        v_terms = (weight * np.sign(eps))[:, None] * x
        sums["V"] += v_terms.sum(axis=0)
        sums["V2"] += (v_terms * v_terms).sum(axis=0)
        sums["S"] += ((eps * eps)[:, None, None] * outer).sum(axis=0)
        abs_sum += float(np.abs(eps).sum())
        abs_sq += float((eps * eps).sum())

    M, M_se = _mean_and_se(sums["M"], sums["M2"], mc_samples)
    V, V_se = _mean_and_se(sums["V"], sums["V2"], mc_samples)
    mean_abs, mean_abs_se = _mean_and_se(np.array(abs_sum), np.array(abs_sq), mc_samples)
    score = sums["S"] / mc_samples

    summary = MomentSummary(
        M=0.5 * (M + M.T),
        V=V,
        mean_abs_eps=float(mean_abs),
        mc_samples=mc_samples,
        M_se=0.5 * (M_se + M_se.T),
        V_se=V_se,
        mean_abs_eps_se=float(mean_abs_se),
        score_covariance=0.5 * (score + score.T),
    )
    if isinstance(model.link, LinearGaussian):
        summary.V_analytic = np.zeros(p)
        summary.mean_abs_eps_analytic = model.link.sigma * math.sqrt(2.0 / math.pi)
    return summary


def compute_moments(
    model: ModelSpec, mc_samples: int, seed: int, cache: Optional[CacheManager] = None
) -> MomentSummary:
    """
    Estime M, V et E|ε₁| par Monte Carlo (mc_samples ≥ 10⁴).

    Le calcul est découpé en sous-flux aléatoires (seed, k) de taille fixe,
    donc le résultat ne dépend que de (model, mc_samples, seed).
    """
    if mc_samples < MIN_MOMENT_SAMPLES:
        raise ValueError(f"mc_samples must be >= {MIN_MOMENT_SAMPLES}, got {mc_samples}")
    seed = check_seed(seed)

    if cache is not None:
        return cache.get_or_compute(
            lambda: _compute_moments(model, mc_samples, seed),
            "moments",
            model.fingerprint(),
            int(mc_samples),
            seed,
        )

    summary = _compute_moments(model, mc_samples, seed)
    logger.debug(
        "Moments computed",
        mc_samples=mc_samples,
        mean_abs_eps=summary.mean_abs_eps,
        v_norm=float(np.linalg.norm(summary.V)),
    )
    return summary


# --------------------------------------------------------------------------- #
# Problème limite
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class PenaltyCase:
    """Cas de pénalité de l'objectif limite : lgamma_gt1, lasso, lgamma_lt1 ou scad."""

    kind: str
    gamma: float = 1.0

    KINDS = ("lgamma_gt1", "lasso", "lgamma_lt1", "scad")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown penalty case '{self.kind}'")
        if self.kind == "lgamma_gt1" and not self.gamma > 1:
            raise ValueError(f"lgamma_gt1 requires gamma > 1, got {self.gamma}")
        if self.kind == "lgamma_lt1" and not 0 < self.gamma < 1:
            raise ValueError(f"lgamma_lt1 requires 0 < gamma < 1, got {self.gamma}")
        if self.kind == "lasso" and self.gamma != 1.0:
            raise ValueError("lasso case has gamma = 1")

    @classmethod
    def from_penalty(cls, spec: PenaltySpec) -> "PenaltyCase":
        if isinstance(spec, Scad):
            return cls("scad")
        if isinstance(spec, Lasso):
            return cls("lasso")
        if isinstance(spec, LGamma):
            if spec.gamma > 1:
                return cls("lgamma_gt1", spec.gamma)
            if spec.gamma < 1:
                return cls("lgamma_lt1", spec.gamma)
            return cls("lasso")
        raise TypeError(f"no limit case for penalty {type(spec).__name__}")

    @property
    def concave(self) -> bool:
        """D est concave sauf pour L_γ avec 0 < γ < 1."""
        return self.kind != "lgamma_lt1"

    @property
    def has_bias_term(self) -> bool:
        return self.kind != "scad"


@dataclass(frozen=True, eq=False)
class LimitProblem:
    """
    Données de D(u) : moments, cas de pénalité, λ₀, β₀ et rayon K.

    baseline=True donne la limite de la vraisemblance pénalisée : λ₀ remplace
    λ₀E|ε₁| et le terme en V disparaît.
    """

    moments: MomentSummary
    penalty_case: PenaltyCase
    lambda0: float
    beta0: np.ndarray
    radius_K: float = 10.0
    baseline: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.lambda0) and self.lambda0 >= 0):
            raise ValueError(f"lambda0 must be >= 0, got {self.lambda0}")
        if not self.radius_K > 0:
            raise ValueError("radius_K must be positive")
        beta0 = np.array(self.beta0, dtype=float)
        if beta0.shape != (self.moments.p,):
            raise ShapeMismatchError(f"beta0 must have length {self.moments.p}, got shape {beta0.shape}")
        beta0.setflags(write=False)
        object.__setattr__(self, "beta0", beta0)

    @property
    def p(self) -> int:
        return self.beta0.shape[0]

    @property
    def gamma(self) -> float:
        return self.penalty_case.gamma

    def as_baseline(self) -> "LimitProblem":
        return LimitProblem(self.moments, self.penalty_case, self.lambda0, self.beta0, self.radius_K, baseline=True)


@dataclass
class AsymptoticDraw:
    """Un tirage W ∼ N(0, Σ_W), l'argmax u* de D sur ‖u‖ ≤ K et D(u*)."""

    W: np.ndarray
    u_star: np.ndarray
    d_value: float
    multimodal: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "W": self.W.tolist(),
            "u_star": self.u_star.tolist(),
            "d_value": self.d_value,
            "multimodal": self.multimodal,
        }


@dataclass(frozen=True)
class _Structure:
    shift: np.ndarray
    kappa: float
    q: float
    sparse: np.ndarray


def _structure(problem: LimitProblem) -> _Structure:
    case = problem.penalty_case
    beta0 = problem.beta0
    noise = problem.lambda0 if problem.baseline else problem.lambda0 * problem.moments.mean_abs_eps
    zero = beta0 == 0.0

    if case.kind == "lgamma_gt1":
        linear = case.gamma * np.sign(beta0) * np.abs(beta0) ** (case.gamma - 1.0)
        kappa, q, sparse = 0.0, 1.0, np.zeros(problem.p, dtype=bool)
    elif case.kind == "lasso":
        linear = np.sign(beta0)
        kappa, q, sparse = noise, 1.0, zero
    elif case.kind == "lgamma_lt1":
        linear = np.zeros(problem.p)
        kappa, q, sparse = noise, case.gamma, zero
    else:
        linear = np.zeros(problem.p)
        kappa, q, sparse = noise, 1.0, zero

    shift = -noise * linear
    if case.has_bias_term and not problem.baseline:
        shift = shift + problem.lambda0 * float(np.sum(np.abs(beta0) ** case.gamma)) * problem.moments.V
    return _Structure(shift=shift, kappa=kappa, q=q, sparse=sparse)


def _check_vector(problem: LimitProblem, values, name: str) -> np.ndarray:
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if values.shape != (problem.p,):
        raise ShapeMismatchError(f"{name} must have length {problem.p}, got shape {values.shape}")
    return values


def _value(c: np.ndarray, M: np.ndarray, s: _Structure, u: np.ndarray, mu: float = 0.0) -> float:
    penalty = s.kappa * float(np.sum(np.abs(u[s.sparse]) ** s.q)) if s.kappa > 0 else 0.0
    return float(c @ u - 0.5 * u @ M @ u - penalty - 0.5 * mu * (u @ u))


def limit_objective(problem: LimitProblem, W, u) -> float:
    """D(u) pour le cas de pénalité du problème (ou D̃ si baseline)."""
    W = _check_vector(problem, W, "W")
    u = _check_vector(problem, u, "u")
    s = _structure(problem)
    return _value(W + s.shift, problem.moments.M, s, u)


# --------------------------------------------------------------------------- #
# Maximisation de D sur la boule
# --------------------------------------------------------------------------- #

def _sparse_coordinate(a: float, m: float, kappa: float, q: float) -> float:
    """
    argmax_t a·t − ½ m t² − κ|t|^q.

    q = 1 : seuillage doux. q < 1 : le seul maximum local intérieur est la racine
    de la dérivée au-delà du point d'inflexion t_c, comparée ensuite à t = 0.
    """
    if q == 1.0:
        return math.copysign(max(abs(a) - kappa, 0.0), a) / m
    b = abs(a)
    upper = b / m
    if upper == 0.0:
        return 0.0

    def slope(t: float) -> float:
        return b - m * t - kappa * q * t ** (q - 1.0)

    inflection = (kappa * q * (1.0 - q) / m) ** (1.0 / (2.0 - q))
    if inflection >= upper or slope(inflection) <= 0.0:
        return 0.0
    t = brentq(slope, inflection, upper, xtol=1e-14)
    # 0 l'emporte en cas d'égalité
    if b * t - 0.5 * m * t * t - kappa * t**q > 0.0:
        return math.copysign(t, a)
    return 0.0


def _coordinate_ascent(
    c: np.ndarray, M: np.ndarray, s: _Structure, mu: float, start: np.ndarray
) -> np.ndarray:
    u = np.array(start, dtype=float)
    diag = np.diag(M) + mu
    if np.any(diag <= 0):
        raise SingularMatrixError("limit problem has a non-positive curvature direction")

    for _ in range(MAX_SWEEPS):
        largest = 0.0
        for j in range(u.shape[0]):
            a = c[j] - (M[j] @ u - M[j, j] * u[j])
            if s.sparse[j] and s.kappa > 0:
                new = _sparse_coordinate(a, diag[j], s.kappa, s.q)
            else:
                new = a / diag[j]
            largest = max(largest, abs(new - u[j]))
            u[j] = new
        if largest <= COORDINATE_TOL * (1.0 + float(np.max(np.abs(u)))):
            return u
    raise NonConvergenceError("coordinate ascent on D(u) exhausted its sweep budget", iterations=MAX_SWEEPS)


def _concave_solver(c: np.ndarray, M: np.ndarray, s: _Structure) -> Callable[[float], Tuple[np.ndarray, bool]]:
    smooth = s.kappa == 0 or not s.sparse.any()

    def solve(mu: float) -> Tuple[np.ndarray, bool]:
        if smooth:
            try:
                return linalg.solve(M + mu * np.eye(c.shape[0]), c, assume_a="sym"), False
            except linalg.LinAlgError as e:
                raise SingularMatrixError(f"limit curvature matrix is singular: {e}") from e
        return _coordinate_ascent(c, M, s, mu, np.zeros_like(c)), False

    return solve


def _starts_nonconvex(c: np.ndarray, M: np.ndarray, mu: float, K: float) -> List[np.ndarray]:
    p = c.shape[0]
    fallback = K / (2.0 * math.sqrt(p))
    starts = [np.zeros(p)]
    try:
        unconstrained = linalg.solve(M + mu * np.eye(p), c, assume_a="sym")
        starts.append(unconstrained)
        magnitude = np.where(np.abs(unconstrained) > 0, np.abs(unconstrained), fallback)
    except linalg.LinAlgError:
        magnitude = np.full(p, fallback)

    for signs in itertools.product((-1.0, 1.0), repeat=p):
        starts.append(np.asarray(signs) * magnitude)

    if p <= MAX_GRID_DIM:
        axis = np.linspace(-K, K, GRID_POINTS_PER_AXIS)
        for point in itertools.product(axis, repeat=p):
            point = np.asarray(point)
            if np.linalg.norm(point) <= K:
                starts.append(point)

    scaled = []
    for start in starts:
        length = float(np.linalg.norm(start))
        scaled.append(start * (K / length) if length > K else start)
    return scaled


def _nonconvex_solver(
    c: np.ndarray, M: np.ndarray, s: _Structure, K: float
) -> Callable[[float], Tuple[np.ndarray, bool]]:
    def solve(mu: float) -> Tuple[np.ndarray, bool]:
        maxima = []
        for start in _starts_nonconvex(c, M, mu, K):
            u = _coordinate_ascent(c, M, s, mu, start)
            maxima.append((_value(c, M, s, u, mu), u))

        best_value = max(value for value, _ in maxima)
        scale = 1.0 + abs(best_value)
        tied = [u for value, u in maxima if value >= best_value - TIE_TOL * scale]
        winner = min(tied, key=lambda u: tuple(u.tolist()))

        near = [u for value, u in maxima if value >= best_value - MULTIMODAL_VALUE_TOL]
        multimodal = any(
            np.linalg.norm(a - b) > MULTIMODAL_LOCATION_TOL for a, b in itertools.combinations(near, 2)
        )
        return winner, multimodal

    return solve


def _solve_in_ball(solve: Callable[[float], Tuple[np.ndarray, bool]], M: np.ndarray, c: np.ndarray, K: float):
    """Multiplicateur μ ≥ 0 de la contrainte ‖u‖ ≤ K trouvé par bissection."""
    if float(np.linalg.eigvalsh(M).min()) > 1e-12:
        u, multimodal = solve(0.0)
        if np.linalg.norm(u) <= K:
            return u, multimodal

    lo = 0.0
    hi = max(float(np.linalg.norm(c)) / K, 1e-12)
    u_hi, mm_hi = solve(hi)
    while np.linalg.norm(u_hi) > K:
        lo, hi = hi, 2.0 * hi
        u_hi, mm_hi = solve(hi)

    for _ in range(BISECTION_STEPS):
        if hi - lo <= 1e-15 * max(hi, 1.0):
            break
        mid = 0.5 * (lo + hi)
        u_mid, mm_mid = solve(mid)
        if np.linalg.norm(u_mid) > K:
            lo = mid
        else:
            hi, u_hi, mm_hi = mid, u_mid, mm_mid
    return u_hi, mm_hi


def limit_argmax(problem: LimitProblem, W) -> AsymptoticDraw:
    """
    argmax de D sur ‖u‖ ≤ K.

    Cas concaves : montée par coordonnées avec seuillage doux (ou résolution
    linéaire directe sans terme parcimonieux). Cas 0 < γ < 1 : recherche locale
    multi-départs (motifs de signes, solution quadratique, grille), égalités
    départagées par l'ordre lexicographique de u.
    """
    W = _check_vector(problem, W, "W")
    s = _structure(problem)
    c = W + s.shift
    M = problem.moments.M
    K = problem.radius_K

    if problem.penalty_case.concave:
        solver = _concave_solver(c, M, s)
    else:
        solver = _nonconvex_solver(c, M, s, K)

    u_star, multimodal = _solve_in_ball(solver, M, c, K)
    if multimodal:
        logger.debug("Multimodal limit objective", W=W.tolist())
    return AsymptoticDraw(W=W, u_star=u_star, d_value=_value(c, M, s, u_star), multimodal=multimodal)


def sample_w(covariance: np.ndarray, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Tirages exacts de N(0, Σ) par factorisation spectrale symétrique de Σ."""
    eigenvalues, eigenvectors = linalg.eigh(covariance)
    factor = eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))
    z = rng.standard_normal((n_draws, covariance.shape[0]))
    return z @ factor.T


def sample_limit_draws(problem: LimitProblem, n_draws: int, seed: int) -> List[AsymptoticDraw]:
    """n_draws tirages W ∼ N(0, score_covariance) suivis chacun de limit_argmax."""
    rng = np.random.default_rng(check_seed(seed))
    ws = sample_w(problem.moments.score_covariance, n_draws, rng)
    draws = [limit_argmax(problem, w) for w in ws]
    logger.debug(
        "Limit draws sampled",
        n_draws=n_draws,
        case=problem.penalty_case.kind,
        baseline=problem.baseline,
        multimodal=sum(d.multimodal for d in draws),
    )
    return draws


def stationarity_violation(problem: LimitProblem, W, u) -> float:
    """
    Violation maximale des conditions du premier ordre (sous-différentiel compris)
    en u ; le multiplicateur de la boule est estimé quand ‖u‖ = K.
    """
    W = _check_vector(problem, W, "W")
    u = _check_vector(problem, u, "u")
    s = _structure(problem)
    gradient = W + s.shift - problem.moments.M @ u

    penalized = s.sparse & (s.kappa > 0)
    nonzero = u != 0.0
    reduced = gradient.copy()
    active = penalized & nonzero
    reduced[active] -= s.kappa * s.q * np.abs(u[active]) ** (s.q - 1.0) * np.sign(u[active])

    if np.linalg.norm(u) >= problem.radius_K * (1.0 - 1e-9):
        mu = max(0.0, float(reduced @ u) / float(u @ u))
        reduced = reduced - mu * u

    violation = np.where(nonzero | ~penalized, np.abs(reduced), 0.0)
    if s.q == 1.0:
        slack = np.maximum(np.abs(gradient) - s.kappa, 0.0)
        violation = np.where(penalized & ~nonzero, slack, violation)
    return float(np.max(violation)) if violation.size else 0.0


# --------------------------------------------------------------------------- #
# Limite oracle
# --------------------------------------------------------------------------- #

def oracle_limit(problem: LimitProblem, W, sparsity_pattern) -> np.ndarray:
    """
    β̃ = M₁₁⁻¹(W₁ + λ₀‖β₀‖_γ^γ V₁) pour L_γ / LASSO, M₁₁⁻¹W₁ pour SCAD,
    complété par des zéros aux positions du motif.
    """
    W = _check_vector(problem, W, "W")
    pattern = np.asarray(sparsity_pattern, dtype=bool)
    if pattern.shape != (problem.p,):
        raise ShapeMismatchError(f"sparsity_pattern must have length {problem.p}")

    support = ~pattern
    result = np.zeros(problem.p)
    if not support.any():
        return result

    M11 = problem.moments.M[np.ix_(support, support)]
    rhs = W[support].copy()
    if problem.penalty_case.has_bias_term and not problem.baseline:
        norm_gamma = float(np.sum(np.abs(problem.beta0) ** problem.gamma))
        rhs = rhs + problem.lambda0 * norm_gamma * problem.moments.V[support]

    if np.linalg.cond(M11) > 1e12:
        raise SingularMatrixError("M11 is singular")
    try:
        result[support] = linalg.solve(M11, rhs, assume_a="sym")
    except linalg.LinAlgError as e:
        raise SingularMatrixError(f"M11 is singular: {e}") from e
    return result


# --------------------------------------------------------------------------- #
# Vitesses α_n, τ_n
# --------------------------------------------------------------------------- #

@dataclass
class RateCheck:
    """Suites α_n, τ_n sur la grille et pentes log-log ajustées."""

    alpha_sequence: List[Tuple[int, float]]
    tau_sequence: List[Tuple[int, float]]
    alpha_slope: float
    tau_slope: float
    passed: bool

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "n": [n for n, _ in self.alpha_sequence],
                "alpha_n": [v for _, v in self.alpha_sequence],
                "tau_n": [v for _, v in self.tau_sequence],
            }
        )


def loglog_slope(ns: Sequence[float], values: Sequence[float]) -> float:
    """Pente de log(valeur) contre log(n) sur les valeurs > 0 ; −inf si moins de deux."""
    ns = np.asarray(ns, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = np.isfinite(values) & (values > 0)
    if keep.sum() < 2:
        return -math.inf
    return float(np.polyfit(np.log(ns[keep]), np.log(values[keep]), 1)[0])


def check_rates(
    penalty: PenaltySpec, lambda_schedule: Callable[[int], float], beta0, n_grid: Sequence[int]
) -> RateCheck:
    """
    Calcule α_n (branche en u prise à la sonde u = (±1, ..., ±1), composante par
    composante) et τ_n, puis ajuste les pentes ; PASS si les deux ≤ −0.45.
    """
    grid = sorted(int(n) for n in n_grid)
    if len(grid) < 4 or grid[-1] < 100 * grid[0]:
        raise ValueError("n_grid needs at least 4 points spanning at least 2 decades")
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    nonzero = beta0 != 0.0
    probe = np.concatenate([np.ones(beta0.shape[0]), -np.ones(beta0.shape[0])])

    alpha, tau = [], []
    for n in grid:
        spec = penalty.with_lambda(lambda_schedule(n))
        r_n = 1.0 / math.sqrt(n)
        derivative = np.abs(np.atleast_1d(penalty_derivative(spec, beta0)))[nonzero]
        derivative_branch = float(derivative.max()) if derivative.size else 0.0
        probe_branch = float(np.max(spec.elementwise(r_n * probe))) / r_n
        alpha.append((n, max(derivative_branch, probe_branch)))
        tau.append((n, float(np.max(spec.elementwise(beta0)))))

    alpha_slope = loglog_slope(grid, [v for _, v in alpha])
    tau_slope = loglog_slope(grid, [v for _, v in tau])
    passed = alpha_slope <= RATE_PASS_SLOPE and tau_slope <= RATE_PASS_SLOPE
    logger.info("Rate check completed", alpha_slope=alpha_slope, tau_slope=tau_slope, passed=passed)
    return RateCheck(alpha, tau, alpha_slope, tau_slope, passed)


# --------------------------------------------------------------------------- #
# Conditions sur les signes des erreurs
# --------------------------------------------------------------------------- #

@dataclass
class SignConditionProbe:
    """Table (n, sup de la masse des résidus, sup de la marge) et pentes de décroissance."""

    rows: pd.DataFrame
    residual_slope: float
    residual_ratio_slope: float
    margin_slope: float


def sphere_directions(p: int, C: float, count: int, seed: int) -> np.ndarray:
    """`count` directions quasi-aléatoires (Sobol brouillé) sur la sphère ‖u‖ = C."""
    sobol = qmc.Sobol(d=p, scramble=True, seed=seed)
    points = np.clip(sobol.random(count), 1e-12, 1.0 - 1e-12)
    gaussian = norm.ppf(points)
    lengths = np.linalg.norm(gaussian, axis=1, keepdims=True)
    lengths[lengths == 0] = 1.0
    return C * gaussian / lengths


def probe_sign_conditions(
    model: ModelSpec,
    C: float,
    n_grid: Sequence[int],
    mc_samples: int,
    seed: int,
    n_directions: int = 64,
) -> SignConditionProbe:
    """
    Estime, pour chaque n, le sup sur ‖u‖ = C de
      E[ε(1{0 ≤ ε ≤ r_n x^Tu} − 1{r_n x^Tu ≤ ε ≤ 0})]   et
      E[x^Tu(1{0 ≤ ε ≤ r_n x^Tu} − 1{r_n x^Tu ≤ ε ≤ 0})]
    sur un échantillon Monte Carlo commun.
    """
    if not C > 0:
        raise ValueError("C must be positive")
    seed = check_seed(seed)
    rng = np.random.default_rng(seed)
    x = model.covariates.sample(mc_samples, rng)
    theta = x @ model.beta0
    eps = model.link.sample_response(theta, rng) - model.link.b1(theta)

    directions = sphere_directions(model.p, C, n_directions, seed)
    t = x @ directions.T
    e = eps[:, None]

    rows = []
    for n in sorted(int(v) for v in n_grid):
        bound = t / math.sqrt(n)
        upper = (e >= 0) & (e <= bound)
        lower = (bound <= e) & (e <= 0)
        indicator = upper.astype(float) - lower.astype(float)
        residual_sup = float(np.max(np.mean(e * indicator, axis=0)))
        margin_sup = float(np.max(np.mean(t * indicator, axis=0)))
        rows.append(
            {"n": n, "residual_sup": residual_sup, "margin_sup": margin_sup, "residual_ratio": residual_sup * math.sqrt(n)}
        )

    frame = pd.DataFrame(rows, columns=["n", "residual_sup", "margin_sup", "residual_ratio"])
    probe = SignConditionProbe(
        rows=frame,
        residual_slope=loglog_slope(frame["n"], frame["residual_sup"]),
        residual_ratio_slope=loglog_slope(frame["n"], frame["residual_ratio"]),
        margin_slope=loglog_slope(frame["n"], frame["margin_sup"]),
    )
    logger.info(
        "Sign condition probe completed",
        residual_slope=probe.residual_slope,
        margin_slope=probe.margin_slope,
        directions=n_directions,
    )
    return probe


# --------------------------------------------------------------------------- #
# Queues des covariables
# --------------------------------------------------------------------------- #

@dataclass
class TailCheck:
    estimate: float
    standard_error: float
    stable: bool
    prefix_estimates: List[Tuple[int, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimate": self.estimate,
            "standard_error": self.standard_error,
            "stable": self.stable,
            "prefix_estimates": [[n, v] for n, v in self.prefix_estimates],
        }


def validate_tail(model: ModelSpec, moment_order: int, mc_samples: int, seed: int) -> TailCheck:
    """
    Estime E[‖x‖^k (1 + e^{|x^Tβ₀|})] et teste sa stabilité sur les préfixes
    N/8, N/4, N/2, N d'un même échantillon (écart relatif < 20 %).
    """
    if moment_order not in (1, 2):
        raise ValueError(f"moment_order must be 1 or 2, got {moment_order}")
    if mc_samples < 8:
        raise ValueError("mc_samples must be >= 8")
    rng = np.random.default_rng(check_seed(seed))
    x = model.covariates.sample(mc_samples, rng)

    with np.errstate(over="ignore", invalid="ignore"):
        values = np.linalg.norm(x, axis=1) ** moment_order * (1.0 + np.exp(np.abs(x @ model.beta0)))
        prefixes = [mc_samples // 8, mc_samples // 4, mc_samples // 2, mc_samples]
        estimates = [(size, float(np.mean(values[:size]))) for size in prefixes]
        estimate = estimates[-1][1]
        standard_error = float(np.std(values) / math.sqrt(mc_samples))

    finite = [v for _, v in estimates]
    if not all(np.isfinite(finite)) or not np.isfinite(standard_error):
        stable = False
    else:
        spread = max(finite) - min(finite)
        stable = spread < TAIL_STABILITY * abs(estimate) if estimate != 0 else spread == 0
    logger.info("Tail check completed", order=moment_order, estimate=estimate, stable=stable)
    return TailCheck(estimate=estimate, standard_error=standard_error, stable=stable, prefix_estimates=estimates)
