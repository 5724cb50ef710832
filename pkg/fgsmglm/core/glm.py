"""
Noyau GLM : familles à lien canonique, distributions des covariables et jeux de données.

Toutes les structures sont immuables après construction ; toutes les opérations
sont pures étant donnée une graine explicite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Dict, Optional, Union

import numpy as np
import pandas as pd
import structlog
from scipy import linalg
from scipy.special import expit

from fgsmglm.core.errors import ShapeMismatchError

logger = structlog.get_logger(__name__)

MAX_SEED = 2**64


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    """Copie en float64, vérifie la dimension et verrouille en écriture."""
    arr = np.array(values, dtype=float)
    if ndim == 1:
        arr = np.atleast_1d(arr)
    if arr.ndim != ndim:
        raise ShapeMismatchError(f"{name} must have {ndim} dimension(s), got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


# --------------------------------------------------------------------------- #
# Familles à lien canonique
# --------------------------------------------------------------------------- #

class LinkFamily:
    """Famille exponentielle à lien canonique, entièrement décrite par sa fonction b."""

    name: ClassVar[str] = "abstract"

    def b(self, theta) -> np.ndarray:
        raise NotImplementedError

    def b1(self, theta) -> np.ndarray:
        raise NotImplementedError

    def b2(self, theta) -> np.ndarray:
        raise NotImplementedError

    def b3(self, theta) -> np.ndarray:
        raise NotImplementedError

    def sample_response(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Tire y_i selon la loi conditionnelle du GLM au prédicteur theta."""
        raise NotImplementedError

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.name}


@dataclass(frozen=True)
class LinearGaussian(LinkFamily):
    """
    Régression linéaire gaussienne.

    b(θ) = θ²/2 ; sigma n'intervient que dans l'échantillonneur et les moments.
    """

    sigma: float = 1.0
    name: ClassVar[str] = "linear"

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")

    def b(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return 0.5 * theta * theta

    def b1(self, theta) -> np.ndarray:
        return np.array(theta, dtype=float)

    def b2(self, theta) -> np.ndarray:
        return np.ones_like(np.asarray(theta, dtype=float))

    def b3(self, theta) -> np.ndarray:
        return np.zeros_like(np.asarray(theta, dtype=float))

    def sample_response(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return theta + self.sigma * rng.standard_normal(theta.shape)

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.name, "sigma": float(self.sigma)}


@dataclass(frozen=True)
class Logistic(LinkFamily):
    """Régression logistique, b(θ) = log(1 + e^θ)."""

    name: ClassVar[str] = "logistic"

    def b(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        # log1p(e^θ) si θ ≤ 0, θ + log1p(e^{-θ}) si θ > 0
        return np.maximum(theta, 0.0) + np.log1p(np.exp(-np.abs(theta)))

    def b1(self, theta) -> np.ndarray:
        return expit(np.asarray(theta, dtype=float))

    def b2(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        # produit p(1-p) écrit sans soustraction pour rester > 0 jusqu'à |θ| = 700
        return expit(theta) * expit(-theta)

    def b3(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        p, q = expit(theta), expit(-theta)
        return p * q * (q - p)

    def sample_response(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return (rng.random(theta.shape) < self.b1(theta)).astype(float)


def link_from_name(family: str, sigma: float = 1.0) -> LinkFamily:
    """Construit une famille depuis son nom de configuration."""
    if family == LinearGaussian.name:
        return LinearGaussian(sigma=sigma)
    if family == Logistic.name:
        return Logistic()
    raise ValueError(f"Unknown GLM family '{family}' (expected 'linear' or 'logistic')")


# --------------------------------------------------------------------------- #
# Distributions des covariables
# --------------------------------------------------------------------------- #

class CovariateDistribution:
    """Loi des covariables x_i, échantillonnage déterministe étant donné un générateur."""

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class GaussianIID(CovariateDistribution):
    """x ∼ N(mean, covariance), covariance symétrique définie positive."""

    mean: np.ndarray
    covariance: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = _frozen_array(self.mean, 1, "mean")
        cov = _frozen_array(self.covariance, 2, "covariance")
        p = mean.shape[0]
        if cov.shape != (p, p):
            raise ShapeMismatchError(f"covariance must be {p}x{p}, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as e:
            raise ValueError(f"covariance is not positive definite: {e}") from e
        chol.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def standard(cls, p: int) -> "GaussianIID":
        return cls(mean=np.zeros(p), covariance=np.eye(p))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "gaussian", "mean": self.mean.tolist(), "covariance": self.covariance.tolist()}


@dataclass(frozen=True, eq=False)
class UniformBox(CovariateDistribution):
    """x uniforme sur le pavé [lower, upper] ; lower = upper donne une masse ponctuelle."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = _frozen_array(self.lower, 1, "lower")
        upper = _frozen_array(self.upper, 1, "upper")
        if lower.shape != upper.shape:
            raise ShapeMismatchError("lower and upper must have the same length")
        if np.any(lower > upper):
            raise ValueError("lower must be <= upper componentwise")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "uniform", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class Shifted(CovariateDistribution):
    """Loi de base translatée ; sert à construire des designs non neutres en signe."""

    base: CovariateDistribution
    shift: np.ndarray

    def __post_init__(self):
        shift = _frozen_array(self.shift, 1, "shift")
        if shift.shape[0] != self.base.dim:
            raise ShapeMismatchError(f"shift must have length {self.base.dim}, got {shift.shape[0]}")
        object.__setattr__(self, "shift", shift)

    @property
    def dim(self) -> int:
        return self.base.dim

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.base.sample(n, rng) + self.shift

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "shifted", "base": self.base.to_dict(), "shift": self.shift.tolist()}


@dataclass(frozen=True)
class InverseUniformScaled(CovariateDistribution):
    """
    Loi à queue lourde : x = scale · z / U, z ∼ N(0, I), U ∼ Uniform(0, 1].

    E[e^{|x^T β|}] diverge dès que β ≠ 0.
    """

    p: int
    scale: float = 1.0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("dimension must be >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def dim(self) -> int:
        return self.p

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.p))
        u = 1.0 - rng.random(n)
        return self.scale * z / u[:, None]

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "heavy", "p": self.p, "scale": float(self.scale)}


# --------------------------------------------------------------------------- #
# Modèle et jeu de données
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Modèle de simulation : famille, vrai paramètre β₀ et loi des covariables."""

    link: LinkFamily
    beta0: np.ndarray
    covariates: CovariateDistribution

    def __post_init__(self):
        beta0 = _frozen_array(self.beta0, 1, "beta0")
        if beta0.shape[0] < 1:
            raise ValueError("p must be >= 1")
        if not np.all(np.isfinite(beta0)):
            raise ValueError("beta0 must be finite")
        if self.covariates.dim != beta0.shape[0]:
            raise ShapeMismatchError(
                f"covariates have dimension {self.covariates.dim}, beta0 has {beta0.shape[0]}"
            )
        object.__setattr__(self, "beta0", beta0)

    @property
    def p(self) -> int:
        return self.beta0.shape[0]

    def to_dict(self) -> Dict[str, Any]:
        return {**self.link.to_dict(), "beta0": self.beta0.tolist(), "covariates": self.covariates.to_dict()}

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Échantillon (x_i, y_i), i = 1..n, avec la graine qui l'a produit."""

    x: np.ndarray
    y: np.ndarray
    seed: int = 0
    model_provenance: Optional[ModelSpec] = None

    def __post_init__(self):
        x = _frozen_array(self.x, 2, "x")
        y = _frozen_array(self.y, 1, "y")
        if x.shape[0] != y.shape[0]:
            raise ShapeMismatchError(f"x has {x.shape[0]} rows but y has {y.shape[0]} entries")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        if isinstance(getattr(self.model_provenance, "link", None), Logistic):
            if not np.all((y == 0.0) | (y == 1.0)):
                raise ValueError("logistic responses must be 0 or 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "seed", check_seed(self.seed))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


def check_beta(dataset: Dataset, beta) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.ndim != 1 or beta.shape[0] != dataset.p:
        raise ShapeMismatchError(f"beta has shape {beta.shape}, dataset has p={dataset.p}")
    return beta


def linear_predictor(dataset: Dataset, beta) -> np.ndarray:
    """θ_i = x_i^T β."""
    beta = check_beta(dataset, beta)
    return dataset.x @ beta


def residuals(dataset: Dataset, beta, link: LinkFamily) -> np.ndarray:
    """e_i = y_i − b′(x_i^T β) ; au vrai paramètre β₀ ce sont les erreurs ε_i."""
    return dataset.y - link.b1(linear_predictor(dataset, beta))


def loglik(dataset: Dataset, beta, link: LinkFamily) -> float:
    """Σ_i [y_i x_i^T β − b(x_i^T β)] (somme vide = 0)."""
    theta = linear_predictor(dataset, beta)
    return float(np.sum(dataset.y * theta - link.b(theta)))


def sample_dataset(model: ModelSpec, n: int, seed: int) -> Dataset:
    """
    Tire n observations i.i.d. du modèle.

    Le même triplet (model, n, seed) produit un jeu de données identique au bit près :
    covariables d'abord, puis réponses, depuis un unique générateur.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    seed = check_seed(seed)
    rng = np.random.default_rng(seed)
    x = model.covariates.sample(n, rng)
    y = model.link.sample_response(x @ model.beta0, rng)
    return Dataset(x=x, y=y, seed=seed, model_provenance=model)


# --------------------------------------------------------------------------- #
# Sérialisation CSV + métadonnées JSON
# --------------------------------------------------------------------------- #

def metadata_path(path: Union[str, Path]) -> Path:
    return Path(f"{path}.meta.json")


def write_dataset(dataset: Dataset, path: Union[str, Path], family: Optional[str] = None) -> Path:
    """
    Écrit le jeu de données en CSV (x1,...,xp,y ; 17 chiffres significatifs)
    et ses métadonnées dans <path>.meta.json.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    frame = pd.DataFrame(dataset.x, columns=[f"x{j + 1}" for j in range(dataset.p)])
    frame["y"] = dataset.y
    frame.to_csv(path, index=False, float_format="%.17g")

    model = dataset.model_provenance
    meta: Dict[str, Any] = {
        "seed": dataset.seed,
        "n": dataset.n,
        "p": dataset.p,
        "family": model.link.name if model is not None else family,
        "beta0": model.beta0.tolist() if model is not None else None,
    }
    if model is not None and isinstance(model.link, LinearGaussian):
        meta["sigma"] = model.link.sigma
    with open(metadata_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)

    logger.info("Dataset written", path=str(path), n=dataset.n, p=dataset.p)
    return path


def read_metadata(path: Union[str, Path]) -> Dict[str, Any]:
    """Relit les métadonnées associées à un CSV (dictionnaire vide si absentes)."""
    meta_file = metadata_path(path)
    if not meta_file.exists():
        return {}
    with open(meta_file, "r", encoding="utf-8") as f:
        return json.load(f)


def read_dataset(path: Union[str, Path]) -> Dataset:
    """Relit un CSV écrit par write_dataset (ou tout CSV au même schéma)."""
    path = Path(path)
    frame = pd.read_csv(path, float_precision="round_trip")
    columns = list(frame.columns)
    p = len(columns) - 1
    expected = [f"x{j + 1}" for j in range(p)] + ["y"]
    if p < 1 or columns != expected:
        raise ValueError(f"unexpected CSV header {columns}, expected {expected}")

    meta = read_metadata(path)
    dataset = Dataset(
        x=frame[expected[:-1]].to_numpy(dtype=float),
        y=frame["y"].to_numpy(dtype=float),
        seed=int(meta.get("seed", 0)),
    )
    if meta.get("family") == Logistic.name and not np.all((dataset.y == 0.0) | (dataset.y == 1.0)):
        raise ValueError("logistic responses must be 0 or 1")
    logger.debug("Dataset loaded", path=str(path), n=dataset.n, p=dataset.p)
    return dataset
