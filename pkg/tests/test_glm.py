"""Laplace fit correctness against closed forms and the quadrature oracle."""

import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.special import expit, ndtr
from scipy import stats

from mamsim import glm
from mamsim.glm import (
    FitError,
    NonConvergedError,
    PriorSpec,
    build_design_matrix,
    default_prior,
    fit_laplace,
    marginal_posterior_prob,
    quadrature_oracle_prob,
)

from trial_designs import count_dose_design, validated


def conjugate_posterior(x, y, sigma, prior):
    """Closed-form gaussian posterior for a gaussian likelihood, known sd."""
    precision = np.diag(prior.precision) + x.T @ x / sigma**2
    cov = np.linalg.inv(precision)
    mean = cov @ (prior.precision * prior.mean + x.T @ y / sigma**2)
    return mean, cov


class TestDesignMatrix:
    def setup_method(self):
        self.model = validated(count_dose_design()).spec.model

    def test_one_subject_per_arm(self):
        data = SimpleNamespace(
            arm=np.array(["control", "A", "B", "C"]),
            covariates={},
            response=np.zeros(4),
        )
        design, _ = build_design_matrix(data, self.model)
        assert design.columns == ("intercept", "A", "B", "C")
        expected = [[1, 0, 0, 0], [1, 1, 0, 0], [1, 0, 1, 0], [1, 0, 0, 1]]
        assert np.array_equal(design.values, np.array(expected, dtype=float))

    def test_all_control_rows(self):
        data = SimpleNamespace(
            arm=np.array(["control"] * 5), covariates={}, response=np.zeros(5)
        )
        design, _ = build_design_matrix(data, self.model)
        assert np.all(design.values[:, 1:] == 0)

    def test_truth_mean_for_highest_dose(self):
        # dummy coding: arm C mean = exp(log 4 + log 0.4) = 1.6
        beta = np.array(validated(count_dose_design()).spec.beta_true)
        row = np.array([1.0, 0.0, 0.0, 1.0])
        assert math.exp(row @ beta) == pytest.approx(1.6)

    def test_unknown_arm_label(self):
        data = SimpleNamespace(arm=np.array(["Z"]), covariates={}, response=np.zeros(1))
        with pytest.raises(FitError, match="Z"):
            build_design_matrix(data, self.model)


class TestGaussianExactness:
    def test_intercept_only_reference_values(self):
        fit = fit_laplace(np.ones((3, 1)), [1.0, 2.0, 3.0], "gaussian", "identity", {"sd": 1.0})
        assert fit.converged
        assert fit.marginal_mean[0] == pytest.approx(6.0 / 3.001, abs=1e-10)
        assert fit.marginal_sd[0] == pytest.approx(1.0 / math.sqrt(3.001), abs=1e-10)

    def test_matches_conjugate_closed_form(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            n = int(rng.integers(5, 200))
            p = int(rng.integers(1, 5))
            x = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
            sigma = float(rng.uniform(0.5, 3.0))
            y = rng.normal(size=n) * sigma
            prior = PriorSpec(rng.normal(size=p), rng.uniform(0.001, 1.0, p))
            fit = fit_laplace(x, y, "gaussian", "identity", {"sd": sigma}, prior)
            mean, cov = conjugate_posterior(x, y, sigma, prior)
            np.testing.assert_allclose(fit.marginal_mean, mean, atol=1e-8)
            np.testing.assert_allclose(fit.marginal_sd, np.sqrt(np.diag(cov)), atol=1e-8)
            delta = float(rng.normal())
            k = int(rng.integers(0, p))
            want = float(ndtr(-(delta - mean[k]) / math.sqrt(cov[k, k])))
            got = marginal_posterior_prob(fit, k, delta, "greater")
            assert got == pytest.approx(want, abs=1e-8)


class TestFitBehaviour:
    def test_separation_regularised_by_prior(self):
        fit = fit_laplace(np.ones((20, 1)), np.zeros(20), "binomial", "logit", {})
        assert fit.converged
        assert fit.mode[0] < -5.0

    def test_empty_arm_column_keeps_prior(self):
        # no subject ever assigned to the second arm: its coefficient's
        # posterior reduces to the prior
        x = np.column_stack([np.ones(30), np.zeros(30)])
        y = np.random.default_rng(0).poisson(2.0, 30).astype(float)
        fit = fit_laplace(x, y, "poisson", "log", {})
        assert fit.converged
        assert fit.marginal_mean[1] == pytest.approx(0.0, abs=1e-6)
        assert fit.marginal_sd[1] == pytest.approx(1.0 / math.sqrt(0.001), rel=1e-6)

    def test_covariance_symmetric(self):
        rng = np.random.default_rng(3)
        x = np.column_stack([np.ones(50), rng.binomial(1, 0.5, 50)])
        y = rng.binomial(1, 0.4, 50).astype(float)
        fit = fit_laplace(x, y, "binomial", "logit", {})
        assert np.max(np.abs(fit.covariance - fit.covariance.T)) < 1e-10

    def test_duplicating_data_shrinks_sd(self):
        rng = np.random.default_rng(9)
        x = np.column_stack([np.ones(60), rng.binomial(1, 0.5, 60)])
        y = rng.binomial(1, 0.45, 60).astype(float)
        fit1 = fit_laplace(x, y, "binomial", "logit", {})
        fit2 = fit_laplace(np.vstack([x, x]), np.r_[y, y], "binomial", "logit", {})
        assert np.all(fit2.marginal_sd < fit1.marginal_sd)

    def test_iteration_cap_reports_non_convergence(self):
        rng = np.random.default_rng(4)
        x = np.column_stack([np.ones(80), rng.binomial(1, 0.5, 80)])
        y = rng.binomial(1, 0.3, 80).astype(float)
        fit = fit_laplace(x, y, "binomial", "logit", {}, max_iterations=1)
        assert not fit.converged
        with pytest.raises(NonConvergedError):
            marginal_posterior_prob(fit, 0, 0.0, "greater")

    def test_dimension_mismatch(self):
        with pytest.raises(FitError, match="design rows"):
            fit_laplace(np.ones((4, 1)), np.zeros(3), "gaussian", "identity", {"sd": 1})

    def test_invalid_nuisance(self):
        with pytest.raises(FitError, match="dispersion"):
            fit_laplace(np.ones((4, 1)), np.zeros(4), "nbinomial", "log", {"dispersion": 0.0})


class TestHessianAgainstFiniteDifferences:
    """The analytic curvature must match central differences of the score."""

    @pytest.mark.parametrize(
        "family,link,nuisance,make_y",
        [
            ("gaussian", "identity", {"sd": 1.7}, lambda rng, mu: rng.normal(mu, 1.7)),
            ("binomial", "logit", {}, lambda rng, mu: rng.binomial(1, mu).astype(float)),
            ("poisson", "log", {}, lambda rng, mu: rng.poisson(mu).astype(float)),
            (
                "nbinomial",
                "log",
                {"dispersion": 0.7},
                lambda rng, mu: rng.poisson(rng.gamma(0.7, mu / 0.7)).astype(float),
            ),
        ],
    )
    def test_analytic_matches_numeric(self, family, link, nuisance, make_y):
        rng = np.random.default_rng(11)
        x = np.column_stack([np.ones(120), rng.binomial(1, 0.5, 120), rng.normal(0, 0.3, 120)])
        beta_true = np.array([0.2 if link != "log" else 0.8, 0.4, -0.3])
        mu = glm.inverse_link(link, x @ beta_true)
        y = make_y(rng, mu)
        fit = fit_laplace(x, y, family, link, nuisance)
        assert fit.converged
        prior = default_prior(3)

        def score(beta):
            _, d1, _ = glm._family_terms(family, x @ beta, y, nuisance)
            return x.T @ d1 - prior.precision * (beta - prior.mean)

        h = 1e-6
        numeric = np.empty((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            numeric[:, j] = (score(fit.mode + e) - score(fit.mode - e)) / (2 * h)
        _, _, w = glm._family_terms(family, x @ fit.mode, y, nuisance)
        analytic = -((x.T * w) @ x + np.diag(prior.precision))
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


class TestNuisanceMoments:
    def test_gaussian_sd_recovered(self):
        rng = np.random.default_rng(14)
        mu = np.full(50_000, 1.3)
        y = rng.normal(mu, 2.2)
        est = glm.estimate_nuisance_mom("gaussian", y, mu)
        assert est["sd"] == pytest.approx(2.2, rel=0.02)

    def test_nbinomial_dispersion_recovered(self):
        rng = np.random.default_rng(15)
        mu = np.full(200_000, 4.0)
        y = rng.poisson(rng.gamma(0.5, mu / 0.5))
        est = glm.estimate_nuisance_mom("nbinomial", y, mu)
        assert est["dispersion"] == pytest.approx(0.5, rel=0.05)

    def test_underdispersed_counts_rejected(self):
        mu = np.full(100, 4.0)
        with pytest.raises(FitError, match="overdispersion"):
            glm.estimate_nuisance_mom("nbinomial", mu, mu)

    def test_no_nuisance_families(self):
        assert glm.estimate_nuisance_mom("binomial", np.ones(3), np.full(3, 0.5)) == {}
        assert glm.estimate_nuisance_mom("poisson", np.ones(3), np.ones(3)) == {}


class TestMarginalProbability:
    def test_half_at_the_mode(self):
        fit = fit_laplace(np.ones((10, 1)), np.arange(10.0), "gaussian", "identity", {"sd": 2.0})
        mode = float(fit.marginal_mean[0])
        assert marginal_posterior_prob(fit, 0, mode, "greater") == pytest.approx(0.5)
        assert marginal_posterior_prob(fit, 0, mode, "less") == pytest.approx(0.5)

    def test_directions_are_complements(self):
        fit = fit_laplace(np.ones((10, 1)), np.arange(10.0), "gaussian", "identity", {"sd": 2.0})
        for delta in (-1.0, 0.3, 7.7):
            up = marginal_posterior_prob(fit, 0, delta, "greater")
            down = marginal_posterior_prob(fit, 0, delta, "less")
            assert up + down == pytest.approx(1.0, abs=1e-12)

    def test_reference_tail_value(self):
        # mean 1.0, sd 0.5, delta 0, greater: 1 - Phi(-2) ~ 0.97725
        fit = fit_laplace(np.ones((1, 1)), [0.0], "gaussian", "identity", {"sd": 1.0})
        fit.marginal_mean = np.array([1.0])
        fit.marginal_sd = np.array([0.5])
        got = marginal_posterior_prob(fit, 0, 0.0, "greater")
        assert got == pytest.approx(1.0 - stats.norm.cdf(-2.0), abs=1e-10)
        assert got == pytest.approx(0.97725, abs=5e-6)

    def test_strictly_decreasing_in_delta(self):
        # float64 gaussian tails saturate beyond |z| ~ 8; test inside that
        fit = fit_laplace(np.ones((10, 1)), np.arange(10.0), "gaussian", "identity", {"sd": 2.0})
        mean, sd = fit.marginal_mean[0], fit.marginal_sd[0]
        deltas = np.linspace(mean - 7 * sd, mean + 7 * sd, 40)
        probs = [marginal_posterior_prob(fit, 0, d, "greater") for d in deltas]
        assert all(a > b for a, b in zip(probs, probs[1:]))


class TestQuadratureOracle:
    def test_gaussian_conjugate_within_1e6(self):
        x = np.ones((3, 1))
        y = np.array([1.0, 2.0, 3.0])
        prior = default_prior(1)
        mean, cov = conjugate_posterior(x, y, 1.0, prior)
        for delta in (0.5, 1.9993, 3.0):
            want = float(ndtr(-(delta - mean[0]) / math.sqrt(cov[0, 0])))
            got = quadrature_oracle_prob(
                x, y, "gaussian", "identity", {"sd": 1.0}, prior, 0, delta, "greater"
            )
            assert got == pytest.approx(want, abs=1e-6)

    def test_binomial_exact_beta_posterior(self):
        # with an essentially flat prior the intercept posterior transforms
        # to Beta(s, n-s) on the probability scale
        n, s = 60, 21
        x = np.ones((n, 1))
        y = np.r_[np.ones(s), np.zeros(n - s)]
        prior = PriorSpec(np.zeros(1), np.full(1, 1e-8))
        for delta in (-0.9, -0.5, 0.0):
            got = quadrature_oracle_prob(x, y, "binomial", "logit", {}, prior, 0, delta, "greater")
            want = 1.0 - stats.beta.cdf(expit(delta), s, n - s)
            assert got == pytest.approx(want, abs=1e-6)

    def test_two_arm_null_odds_ratio_agreement(self):
        rng = np.random.default_rng(60)
        x = np.column_stack([np.ones(60), np.repeat([0.0, 1.0], 30)])
        y = rng.binomial(1, 0.5, 60).astype(float)
        prior = default_prior(2)
        fit = fit_laplace(x, y, "binomial", "logit", {}, prior)
        for delta in (0.0, 0.4):
            lap = marginal_posterior_prob(fit, 1, delta, "greater")
            orc = quadrature_oracle_prob(x, y, "binomial", "logit", {}, prior, 1, delta, "greater")
            assert abs(lap - orc) < 5e-3

    def test_poisson_all_zero_counts(self):
        x = np.ones((3, 1))
        y = np.zeros(3)
        prior = default_prior(1)
        got = quadrature_oracle_prob(x, y, "poisson", "log", {}, prior, 0, 0.0, "less")
        assert got > 0.5

    def test_oracle_rejects_large_models(self):
        with pytest.raises(FitError, match="at most 3"):
            quadrature_oracle_prob(
                np.ones((5, 4)), np.zeros(5), "gaussian", "identity", {"sd": 1},
                default_prior(4), 0, 0.0, "greater",
            )
