"""
Tests des pénalités L_γ, LASSO et SCAD.
"""

import numpy as np
import pytest
from scipy import integrate

from fgsmglm.core.penalties import (
    LGamma,
    Lasso,
    Scad,
    penalty_derivative,
    penalty_from_config,
    penalty_value,
    perturbation_magnitudes,
)


class TestScad:
    """Tests de la pénalité SCAD (λ = 1, a = 3.7)."""

    def setup_method(self):
        self.scad = Scad(lam=1.0, a=3.7)

    def test_derivative_spot_values(self):
        assert penalty_derivative(self.scad, 0.5) == pytest.approx(1.0, abs=1e-12)
        assert penalty_derivative(self.scad, 2.0) == pytest.approx(0.629630, abs=1e-6)
        assert penalty_derivative(self.scad, 5.0) == 0.0

    def test_value_matches_quadrature(self):
        """La valeur est l'intégrale de la dérivée depuis 0."""
        points = np.linspace(-6.0, 6.0, 100)
        for t in points:
            kinks = [k for k in (1.0, 3.7) if k < abs(t)] or None
            integral, _ = integrate.quad(
                lambda s: abs(penalty_derivative(self.scad, s)), 0.0, abs(t), points=kinks, epsabs=1e-12
            )
            assert penalty_value(self.scad, t) == pytest.approx(integral, abs=1e-8)

    def test_flat_beyond_a_lambda(self):
        assert penalty_value(self.scad, 10.0) == pytest.approx((3.7 + 1) / 2)

    def test_invalid_shape(self):
        with pytest.raises(ValueError):
            Scad(lam=1.0, a=2.0)


class TestLGamma:
    """Tests de L_γ et LASSO."""

    def test_value_and_derivative(self):
        pen = LGamma(gamma=2.0, lam=0.5)
        assert penalty_value(pen, np.array([1.0, -2.0])) == pytest.approx(0.5 * (1 + 4))
        assert np.allclose(penalty_derivative(pen, np.array([1.0, -2.0])), [1.0, -2.0])

    def test_bridge_derivative_at_zero(self):
        """p′ vaut 0 en 0 même pour γ < 1."""
        pen = LGamma(gamma=0.5, lam=1.0)
        assert penalty_derivative(pen, 0.0) == 0.0
        assert np.isfinite(penalty_derivative(pen, 1e-300))

    def test_gamma_one_matches_lasso(self):
        theta = np.array([-1.5, 0.0, 2.0])
        assert penalty_value(LGamma(gamma=1.0, lam=0.3), theta) == pytest.approx(penalty_value(Lasso(lam=0.3), theta))

    def test_vector_is_sum_of_scalars(self):
        pen = LGamma(gamma=1.5, lam=0.7)
        theta = np.array([0.3, -1.2, 2.5])
        assert penalty_value(pen, theta) == pytest.approx(sum(penalty_value(pen, t) for t in theta))

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            LGamma(gamma=0.0, lam=1.0)
        with pytest.raises(ValueError):
            Lasso(lam=-1.0)

    def test_with_lambda(self):
        pen = LGamma(gamma=0.5, lam=1.0).with_lambda(0.1)
        assert isinstance(pen, LGamma) and pen.lam == 0.1 and pen.gamma == 0.5


class TestPerturbationMagnitudes:
    """Tests de p_λ(β_j)/β_j."""

    def test_lasso_is_sign_step(self):
        mags = perturbation_magnitudes(Lasso(lam=0.2), np.array([3.0, -1.0, 0.0]))
        assert np.allclose(mags, [0.2, -0.2, 0.0])

    def test_zero_component_is_zero(self):
        mags = perturbation_magnitudes(LGamma(gamma=0.5, lam=1.0), np.array([0.0, 4.0]))
        assert mags[0] == 0.0
        assert mags[1] == pytest.approx(2.0 / 4.0)


class TestPenaltyFromConfig:
    """Tests de construction depuis la configuration."""

    def test_families(self):
        assert isinstance(penalty_from_config("lasso", 1.0), Lasso)
        assert isinstance(penalty_from_config("scad", 1.0), Scad)
        assert penalty_from_config("scad", 1.0, a=4.0).a == 4.0
        assert isinstance(penalty_from_config("lgamma", 1.0, gamma=2.0), LGamma)
        assert isinstance(penalty_from_config("lgamma", 1.0, gamma=1.0), Lasso)

    def test_errors(self):
        with pytest.raises(ValueError):
            penalty_from_config("lgamma", 1.0)
        with pytest.raises(ValueError):
            penalty_from_config("ridge", 1.0)
