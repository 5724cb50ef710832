"""
Familles de pénalités p_λ : L_γ, LASSO et SCAD.

Sur R^p la pénalité est la somme des pénalités scalaires des composantes.
Convention sign(0) = 0 partout.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, ClassVar, Dict, Optional, Union

import numpy as np

DEFAULT_SCAD_A = 3.7

ArrayLike = Union[float, np.ndarray]


class PenaltySpec:
    """Pénalité séparable p_λ avec valeur et dérivée composante par composante."""

    family: ClassVar[str] = "abstract"
    lam: float

    def elementwise(self, theta: np.ndarray) -> np.ndarray:
        """p_λ(θ_j) pour chaque composante."""
        raise NotImplementedError

    def derivative(self, theta: np.ndarray) -> np.ndarray:
        """p′_λ(θ_j) pour chaque composante (0 en θ_j = 0)."""
        raise NotImplementedError

    def with_lambda(self, lam: float) -> "PenaltySpec":
        """Même famille, même forme, multiplicateur λ remplacé (λ_n d'un calendrier)."""
        return replace(self, lam=float(lam))

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family, "lambda": self.lam}

    def _check_lambda(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")


@dataclass(frozen=True)
class LGamma(PenaltySpec):
    """p_λ(θ) = λ|θ|^γ, γ > 0."""

    gamma: float
    lam: float
    family: ClassVar[str] = "lgamma"

    def __post_init__(self):
        self._check_lambda()
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be > 0, got {self.gamma}")

    def elementwise(self, theta: np.ndarray) -> np.ndarray:
        return self.lam * np.abs(theta) ** self.gamma

    def derivative(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        magnitude = np.abs(theta)
        nonzero = magnitude > 0
        safe = np.where(nonzero, magnitude, 1.0)
        value = self.lam * self.gamma * safe ** (self.gamma - 1.0) * np.sign(theta)
        return np.where(nonzero, value, 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family, "lambda": self.lam, "gamma": self.gamma}


@dataclass(frozen=True)
class Lasso(PenaltySpec):
    """p_λ(θ) = λ|θ|."""

    lam: float
    family: ClassVar[str] = "lasso"

    def __post_init__(self):
        self._check_lambda()

    @property
    def gamma(self) -> float:
        return 1.0

    def elementwise(self, theta: np.ndarray) -> np.ndarray:
        return self.lam * np.abs(theta)

    def derivative(self, theta: np.ndarray) -> np.ndarray:
        return self.lam * np.sign(np.asarray(theta, dtype=float))


@dataclass(frozen=True)
class Scad(PenaltySpec):
    """
    SCAD, définie par sa dérivée
    p′_λ(θ) = sign(θ)[λ 1{|θ| ≤ λ} + (aλ − |θ|)_+ / (a − 1) 1{|θ| > λ}].

    La valeur est l'intégrale de cette dérivée depuis 0.
    """

    lam: float
    a: float = DEFAULT_SCAD_A
    family: ClassVar[str] = "scad"

    def __post_init__(self):
        self._check_lambda()
        if not self.a > 2:
            raise ValueError(f"SCAD shape parameter a must be > 2, got {self.a}")

    def elementwise(self, theta: np.ndarray) -> np.ndarray:
        t = np.abs(np.asarray(theta, dtype=float))
        lam, a = self.lam, self.a
        linear = lam * t
        quadratic = -(t * t - 2.0 * a * lam * t + lam * lam) / (2.0 * (a - 1.0))
        flat = np.full_like(t, (a + 1.0) * lam * lam / 2.0)
        return np.where(t <= lam, linear, np.where(t <= a * lam, quadratic, flat))

    def derivative(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        t = np.abs(theta)
        inner = np.where(
            t <= self.lam,
            self.lam,
            np.maximum(self.a * self.lam - t, 0.0) / (self.a - 1.0),
        )
        return np.sign(theta) * inner

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family, "lambda": self.lam, "a": self.a}


def penalty_from_config(
    family: str, lam: float, gamma: Optional[float] = None, a: Optional[float] = None
) -> PenaltySpec:
    """Construit une pénalité depuis les clés penalty.family / lambda / gamma / a."""
    family = family.lower()
    if family == "lasso":
        return Lasso(lam=lam)
    if family == "scad":
        return Scad(lam=lam, a=DEFAULT_SCAD_A if a is None else a)
    if family == "lgamma":
        if gamma is None:
            raise ValueError("penalty.gamma is required for the lgamma family")
        if gamma == 1.0:
            return Lasso(lam=lam)
        return LGamma(gamma=gamma, lam=lam)
    raise ValueError(f"Unknown penalty family '{family}' (expected lgamma, lasso or scad)")


def penalty_value(spec: PenaltySpec, theta: ArrayLike) -> float:
    """p_λ(θ) ; pour un vecteur, somme des valeurs scalaires."""
    return float(np.sum(spec.elementwise(np.atleast_1d(np.asarray(theta, dtype=float)))))


def penalty_derivative(spec: PenaltySpec, theta: ArrayLike) -> ArrayLike:
    """p′_λ(θ), composante par composante pour un vecteur."""
    value = spec.derivative(np.asarray(theta, dtype=float))
    if np.ndim(value) == 0:
        return float(value)
    return value


def perturbation_magnitudes(spec: PenaltySpec, beta: np.ndarray) -> np.ndarray:
    """
    Composante j : 1{β_j ≠ 0} p_λ(β_j) / β_j, avec la convention 0·0/0 = 0.

    Pour LASSO cela vaut λ·sign(β_j), le pas FGSM en norme L∞.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    magnitudes = np.zeros_like(beta)
    nonzero = beta != 0.0
    magnitudes[nonzero] = spec.elementwise(beta[nonzero]) / beta[nonzero]
    return magnitudes
