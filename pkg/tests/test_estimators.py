"""
Tests des estimateurs : FGSM généralisé, vraisemblance pénalisée et MLE.
"""

import math
from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError

from fgsmglm.core.adversarial import AdversarialObjective, objective
from fgsmglm.core.errors import NonConvergenceError, NonFiniteObjectiveError, RankDeficiencyError
from fgsmglm.core.estimators import (
    EstimatorOptions,
    fit_fgsm,
    fit_mle,
    fit_penalized_likelihood,
    zero_threshold,
)
from fgsmglm.core.glm import Dataset, GaussianIID, LinearGaussian, Logistic, ModelSpec, loglik, sample_dataset
from fgsmglm.core.harness import TAG_DATASET, derive_seed
from fgsmglm.core.penalties import Lasso, Scad, penalty_value


def _orthogonal_design(n: int, p: int, seed: int) -> np.ndarray:
    """Design à colonnes orthogonales, chacune de norme² égale à n."""
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, p)))
    return q * math.sqrt(n)


def _grid_maximum(f, center: np.ndarray, radius: float, points: int = 201) -> float:
    axis = np.linspace(-radius, radius, points)
    best = -np.inf
    for a in axis:
        for b in axis:
            if a * a + b * b <= radius * radius:
                best = max(best, f(center + np.array([a, b])))
    return best


class TestEstimatorOptions:
    """Tests de validation des options."""

    def test_defaults(self):
        opts = EstimatorOptions()
        assert opts.ball_radius_K == 10.0
        assert opts.restarts == 8
        assert opts.max_iterations == 500

    def test_invalid_values(self):
        with pytest.raises(ValidationError):
            EstimatorOptions(restarts=0)
        with pytest.raises(ValidationError):
            EstimatorOptions(step_tolerance=0.0)
        with pytest.raises(ValidationError):
            EstimatorOptions(seed=-1)

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            EstimatorOptions(radius=3.0)

    def test_zero_threshold(self):
        assert zero_threshold(np.array([0.0, -3.0])) == pytest.approx(4e-6)
        assert zero_threshold(np.zeros(2)) == pytest.approx(1e-6)


class TestFitFgsm:
    """Tests de l'estimateur Generalized FGSM."""

    def setup_method(self):
        self.opts = EstimatorOptions(restarts=3, seed=7)

    def test_single_observation_zero_response(self):
        """n=1, y=0, β₀=0 : Q est maximal en 0."""
        ds = Dataset(x=[[1.0]], y=[0.0])
        for penalty in (Lasso(lam=0.5), Scad(lam=1.0)):
            obj = AdversarialObjective(ds, LinearGaussian(), penalty)
            result = fit_fgsm(obj, [0.0], self.opts)
            assert result.beta_hat[0] == 0.0
            assert result.active_set.tolist() == [True]

    def test_zero_penalty_matches_least_squares(self):
        model = ModelSpec(LinearGaussian(), [1.0, -0.5], GaussianIID.standard(2))
        ds = sample_dataset(model, 50, 21)
        obj = AdversarialObjective(ds, model.link, Lasso(lam=0.0))
        opts = EstimatorOptions(ball_radius_K=100.0, restarts=2)

        result = fit_fgsm(obj, model.beta0, opts)
        ols, *_ = np.linalg.lstsq(ds.x, ds.y, rcond=None)
        assert np.allclose(result.beta_hat, ols, atol=1e-8, rtol=0.0)
        assert result.converged

    def test_grid_oracle(self):
        """Valeur atteinte ≥ maximum sur grille 201×201 dans la boule − 1e-4."""
        model = ModelSpec(Logistic(), [1.0, 0.0], GaussianIID.standard(2))
        ds = sample_dataset(model, 30, 4)
        obj = AdversarialObjective(ds, model.link, Lasso(lam=0.1))
        opts = EstimatorOptions(restarts=4, seed=1)

        result = fit_fgsm(obj, model.beta0, opts)
        radius = opts.ball_radius_K / math.sqrt(ds.n)
        grid_best = _grid_maximum(lambda b: objective(obj, b), model.beta0, radius)
        assert result.objective_value >= grid_best - 1e-4

    def test_objective_value_consistent(self):
        model = ModelSpec(Logistic(), [0.5, -1.0], GaussianIID.standard(2))
        ds = sample_dataset(model, 80, 9)
        obj = AdversarialObjective(ds, model.link, Scad(lam=0.2))
        result = fit_fgsm(obj, model.beta0, self.opts)
        assert result.objective_value == pytest.approx(objective(obj, result.beta_hat), abs=1e-10)
        assert 0 <= result.restart_index < self.opts.restarts

    def test_ball_feasibility(self):
        """Centre éloigné de la vérité : la contrainte de boule est active."""
        model = ModelSpec(LinearGaussian(), [2.0, -2.0], GaussianIID.standard(2))
        ds = sample_dataset(model, 50, 13)
        obj = AdversarialObjective(ds, model.link, Lasso(lam=0.05))
        center = np.zeros(2)
        opts = EstimatorOptions(ball_radius_K=1.0, restarts=3)

        result = fit_fgsm(obj, center, opts)
        assert np.linalg.norm(result.beta_hat - center) <= 1.0 / math.sqrt(50) + 1e-12

    def test_determinism(self):
        model = ModelSpec(Logistic(), [1.0, 0.0, -1.0], GaussianIID.standard(3))
        ds = sample_dataset(model, 60, 3)
        obj = AdversarialObjective(ds, model.link, Scad(lam=0.3))
        first = fit_fgsm(obj, model.beta0, self.opts)
        second = fit_fgsm(obj, model.beta0, self.opts)
        assert first.beta_hat.tobytes() == second.beta_hat.tobytes()
        assert first.restart_index == second.restart_index
        assert first.iterations_used == second.iterations_used

    def test_non_finite_objective_carries_beta(self):
        ds = Dataset(x=[[1.0], [2.0]], y=[1.0, 0.5])
        obj = AdversarialObjective(ds, LinearGaussian(), Lasso(lam=0.1))
        with patch("fgsmglm.core.estimators.objective", return_value=float("nan")):
            with pytest.raises(NonFiniteObjectiveError) as excinfo:
                fit_fgsm(obj, [0.5], self.opts)
        assert excinfo.value.beta.tolist() == [0.5]

    def test_polish_window_keeps_costly_coefficients(self):
        """Sans pénalité, une petite composante dans la fenêtre K/√n n'est pas mise à zéro."""
        model = ModelSpec(LinearGaussian(), [1.0, 0.0], GaussianIID.standard(2))
        ds = sample_dataset(model, 400, 17)
        obj = AdversarialObjective(ds, model.link, Lasso(lam=0.0))
        opts = EstimatorOptions(restarts=2)

        result = fit_fgsm(obj, model.beta0, opts)
        ols, *_ = np.linalg.lstsq(ds.x, ds.y, rcond=None)
        assert zero_threshold(model.beta0) < abs(ols[1]) < opts.ball_radius_K / math.sqrt(ds.n)
        assert result.beta_hat[1] == pytest.approx(ols[1], abs=1e-8)
        assert not result.active_set[1]
        assert "objective_tolerance" in EstimatorOptions.model_fields["polish_threshold"].description

    def test_result_serialization_keys(self):
        ds = Dataset(x=[[1.0]], y=[0.0])
        result = fit_fgsm(AdversarialObjective(ds, LinearGaussian(), Lasso(lam=0.1)), [0.0], self.opts)
        assert set(result.to_dict()) == {"beta_hat", "objective", "converged", "active_set", "iterations", "restart_index"}


class TestFitPenalizedLikelihood:
    """Tests de l'estimateur de vraisemblance pénalisée."""

    def test_zero_penalty_matches_mle(self):
        model = ModelSpec(Logistic(), [0.8, -0.4], GaussianIID.standard(2))
        ds = sample_dataset(model, 200, 31)
        opts = EstimatorOptions(ball_radius_K=100.0, restarts=2)

        result = fit_penalized_likelihood(ds, model.link, Lasso(lam=0.0), model.beta0, opts)
        mle = fit_mle(ds, model.link)
        assert np.allclose(result.beta_hat, mle.beta_hat, atol=1e-6, rtol=0.0)

    def test_orthogonal_design_soft_threshold(self):
        """Design orthogonal : β̂_j = soft(β̂_OLS,j, λ n / ‖x_j‖²)."""
        n, lam = 40, 0.3
        x = _orthogonal_design(n, 2, 8)
        rng = np.random.default_rng(99)
        y = x @ np.array([1.0, 0.05]) + rng.standard_normal(n)
        ds = Dataset(x=x, y=y)

        col_sq = np.sum(x * x, axis=0)
        ols = x.T @ y / col_sq
        level = lam * n / col_sq
        oracle = np.sign(ols) * np.maximum(np.abs(ols) - level, 0.0)

        opts = EstimatorOptions(ball_radius_K=20.0, restarts=3, seed=5)
        result = fit_penalized_likelihood(ds, LinearGaussian(), Lasso(lam=lam), np.array([1.0, 0.05]), opts)
        assert np.allclose(result.beta_hat, oracle, atol=1e-4, rtol=0.0)
        assert result.active_set.tolist() == (oracle == 0.0).tolist()

    def test_active_ball_converges(self):
        """Logistique avec λ₀ = 2 : la boule est atteinte et la montée converge."""
        model = ModelSpec(Logistic(), [1.0, 0.5], GaussianIID.standard(2))
        n = 1600
        ds = sample_dataset(model, n, derive_seed(3, n, 5, TAG_DATASET))
        penalty = Lasso(lam=2.0 / math.sqrt(n))

        result = fit_penalized_likelihood(ds, model.link, penalty, model.beta0, EstimatorOptions())
        assert result.converged
        assert math.sqrt(n) * np.linalg.norm(result.beta_hat - model.beta0) <= 10.0 + 1e-9

    def test_grid_oracle(self):
        model = ModelSpec(Logistic(), [1.0, 0.0], GaussianIID.standard(2))
        ds = sample_dataset(model, 40, 12)
        penalty = Lasso(lam=0.05)
        opts = EstimatorOptions(restarts=4, seed=2)

        def q_tilde(beta):
            return loglik(ds, beta, model.link) - ds.n * penalty_value(penalty, beta)

        result = fit_penalized_likelihood(ds, model.link, penalty, model.beta0, opts)
        radius = opts.ball_radius_K / math.sqrt(ds.n)
        assert result.objective_value >= _grid_maximum(q_tilde, model.beta0, radius) - 1e-4


class TestZeroPenaltyReduction:
    """Sans pénalité, FGSM, vraisemblance pénalisée et MLE coïncident avec les options par défaut."""

    def test_three_estimators_agree(self):
        model = ModelSpec(LinearGaussian(), [1.0, -0.5, 0.25], GaussianIID.standard(3))
        opts = EstimatorOptions()
        worst = 0.0
        for seed in range(20):
            ds = sample_dataset(model, 500, seed)
            obj = AdversarialObjective(ds, model.link, Lasso(lam=0.0))
            fgsm = fit_fgsm(obj, model.beta0, opts)
            penalized = fit_penalized_likelihood(ds, model.link, Lasso(lam=0.0), model.beta0, opts)
            mle = fit_mle(ds, model.link)
            assert fgsm.converged and penalized.converged
            worst = max(
                worst,
                float(np.max(np.abs(fgsm.beta_hat - mle.beta_hat))),
                float(np.max(np.abs(penalized.beta_hat - mle.beta_hat))),
            )
        assert worst <= 1e-5


class TestFitMle:
    """Tests du MLE de référence."""

    def test_identity_design(self):
        result = fit_mle(Dataset(x=[[1.0, 0.0], [0.0, 1.0]], y=[3.0, -2.0]), LinearGaussian())
        assert np.allclose(result.beta_hat, [3.0, -2.0])
        assert result.converged

    def test_singular_design(self):
        ds = Dataset(x=[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]], y=[1.0, 2.0, 3.0])
        with pytest.raises(RankDeficiencyError):
            fit_mle(ds, LinearGaussian())

    def test_logistic_null_model(self):
        """β₀ = 0, n = 10⁵ : ‖β̂‖ ≤ 0.05."""
        model = ModelSpec(Logistic(), [0.0, 0.0], GaussianIID.standard(2))
        ds = sample_dataset(model, 100_000, 77)
        result = fit_mle(ds, model.link)
        assert np.linalg.norm(result.beta_hat) <= 0.05

    def test_logistic_gradient_is_small(self):
        model = ModelSpec(Logistic(), [1.0, -1.0], GaussianIID.standard(2))
        ds = sample_dataset(model, 500, 6)
        result = fit_mle(ds, model.link)
        gradient = ds.x.T @ (ds.y - model.link.b1(ds.x @ result.beta_hat))
        assert np.linalg.norm(gradient) <= 1e-8

    def test_logistic_iteration_budget(self):
        model = ModelSpec(Logistic(), [1.0, -1.0], GaussianIID.standard(2))
        ds = sample_dataset(model, 500, 6)
        with patch("fgsmglm.core.estimators.MLE_MAX_ITERATIONS", 1):
            with pytest.raises(NonConvergenceError):
                fit_mle(ds, model.link)
