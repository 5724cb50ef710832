"""
Objectif Generalized FGSM Q_n, générateur de covariables perturbées et sous-gradient.

    Q_n(β) = Σ_i [y_i x_i^T β − y_i sign(e_i) p_λ(β) − b(x_i^T β − sign(e_i) p_λ(β))]
    e_i    = y_i − b′(x_i^T β)
    x̃_i   = x_i − sign(e_i) (1{β_j ≠ 0} p_λ(β_j) / β_j)_j
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import structlog

from fgsmglm.core.errors import ShapeMismatchError
from fgsmglm.core.glm import Dataset, LinkFamily, check_beta, loglik
from fgsmglm.core.penalties import PenaltySpec, penalty_value, perturbation_magnitudes

logger = structlog.get_logger(__name__)


@dataclass(frozen=True, eq=False)
class AdversarialObjective:
    """
    Objectif Q_n pour un jeu de données, une famille et une pénalité.

    Par défaut sign(e_i) est recalculé au β évalué. Avec frozen_signs, les signes
    sont fixés une fois pour toutes (variante d'analyse de sensibilité).
    """

    dataset: Dataset
    link: LinkFamily
    penalty: PenaltySpec
    frozen_signs: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.frozen_signs is not None:
            signs = np.array(self.frozen_signs, dtype=float)
            if signs.shape != (self.dataset.n,):
                raise ShapeMismatchError(
                    f"frozen_signs must have shape ({self.dataset.n},), got {signs.shape}"
                )
            signs.setflags(write=False)
            object.__setattr__(self, "frozen_signs", signs)

    @property
    def p(self) -> int:
        return self.dataset.p

    def signs_at(self, theta: np.ndarray) -> np.ndarray:
        if self.frozen_signs is not None:
            return self.frozen_signs
        return np.sign(self.dataset.y - self.link.b1(theta))

    def freeze_signs(self, beta_ref) -> "AdversarialObjective":
        """Copie de l'objectif dont les signes des résidus sont gelés en beta_ref."""
        theta = self.dataset.x @ check_beta(self.dataset, beta_ref)
        signs = np.sign(self.dataset.y - self.link.b1(theta))
        return AdversarialObjective(self.dataset, self.link, self.penalty, frozen_signs=signs)

    def with_penalty(self, penalty: PenaltySpec) -> "AdversarialObjective":
        return AdversarialObjective(self.dataset, self.link, penalty, frozen_signs=self.frozen_signs)


@dataclass(frozen=True, eq=False)
class PerturbedDataset:
    """Covariables perturbées x̃ construites à partir de base au point beta_used."""

    x_tilde: np.ndarray
    base: Dataset
    beta_used: np.ndarray

    def __post_init__(self):
        x_tilde = np.array(self.x_tilde, dtype=float)
        if x_tilde.shape != self.base.x.shape:
            raise ShapeMismatchError("x_tilde must have the shape of the base design")
        beta = np.array(self.beta_used, dtype=float)
        x_tilde.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "x_tilde", x_tilde)
        object.__setattr__(self, "beta_used", beta)

    def max_abs_perturbation(self) -> np.ndarray:
        """max_i |x̃_ij − x_ij| pour chaque colonne j."""
        if self.base.n == 0:
            return np.zeros(self.base.p)
        return np.max(np.abs(self.x_tilde - self.base.x), axis=0)

    def to_dataset(self) -> Dataset:
        return Dataset(
            x=self.x_tilde,
            y=self.base.y,
            seed=self.base.seed,
            model_provenance=self.base.model_provenance,
        )


def _terms(obj: AdversarialObjective, beta) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float, np.ndarray]:
    beta = check_beta(obj.dataset, beta)
    theta = obj.dataset.x @ beta
    signs = obj.signs_at(theta)
    pen = penalty_value(obj.penalty, beta)
    return beta, theta, signs, pen, theta - signs * pen


def objective(obj: AdversarialObjective, beta) -> float:
    """Q_n(β), somme par paires de numpy (ordre déterministe)."""
    _, theta, signs, pen, shifted = _terms(obj, beta)
    y = obj.dataset.y
    return float(np.sum(y * theta - y * signs * pen - obj.link.b(shifted)))


def perturb(obj: AdversarialObjective, beta) -> PerturbedDataset:
    """x̃_i = x_i − sign(e_i) · perturbation_magnitudes(β)."""
    beta, theta, signs, _, _ = _terms(obj, beta)
    magnitudes = perturbation_magnitudes(obj.penalty, beta)
    x_tilde = obj.dataset.x - signs[:, None] * magnitudes[None, :]
    return PerturbedDataset(x_tilde=x_tilde, base=obj.dataset, beta_used=beta)


def perturbed_loglik(obj: AdversarialObjective, beta) -> float:
    """Σ_i [y_i x̃_i^T β − b(x̃_i^T β)] : l'objectif écrit sur l'échantillon perturbé."""
    return loglik(perturb(obj, beta).to_dataset(), beta, obj.link)


def subgradient(obj: AdversarialObjective, beta) -> np.ndarray:
    """
    ∇Q_n à signes sign(e_i) fixés :
    X^T(y − b′(θ̃)) − p′_λ(β) Σ_i sign(e_i)(y_i − b′(θ̃_i)).
    """
    beta, _, signs, _, shifted = _terms(obj, beta)
    resid = obj.dataset.y - obj.link.b1(shifted)
    return obj.dataset.x.T @ resid - obj.penalty.derivative(beta) * float(np.sum(signs * resid))
