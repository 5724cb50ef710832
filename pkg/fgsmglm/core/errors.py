"""
Exceptions du domaine fgsmglm.
"""

from typing import Optional

import numpy as np


class FgsmGlmError(Exception):
    """Racine de toutes les erreurs du package."""


class ShapeMismatchError(FgsmGlmError, ValueError):
    """Dimensions incompatibles entre les entrées."""


class RankDeficiencyError(FgsmGlmError):
    """Matrice de design de rang incomplet."""


class NonConvergenceError(FgsmGlmError):
    """Budget d'itérations épuisé sans convergence."""

    def __init__(self, message: str, iterations: Optional[int] = None):
        super().__init__(message)
        self.iterations = iterations


class NonFiniteObjectiveError(FgsmGlmError):
    """L'objectif est devenu non fini pendant la recherche."""

    def __init__(self, message: str, beta: np.ndarray):
        super().__init__(f"{message} (beta={np.array2string(np.asarray(beta), precision=6)})")
        self.beta = np.array(beta, dtype=float)


class SingularMatrixError(FgsmGlmError):
    """Matrice non inversible (M11 ou M dégénérée)."""


class ConfigError(FgsmGlmError, ValueError):
    """Configuration invalide."""


class ExperimentError(FgsmGlmError):
    """Échec au niveau de l'expérience (ex. trop de non-convergences)."""
