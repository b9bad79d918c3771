import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from pgbme.errors import ValidationError
from pgbme.model import (AdditiveEffects, CovariateSet, LatentUtilities,
                         MultiplicativeEffects, ObservedNetwork,
                         RegressionCoefficients, centered_mean_matrix,
                         joint_tie_probability, joint_tie_probability_matrix,
                         linear_predictor, linear_predictor_matrix,
                         systematic_mean, systematic_mean_matrix)

from conftest import random_covariates

finite = st.floats(-6, 6, allow_nan=False)


def _phi_erf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _hand_covariates():
    node_x = np.array([[2.0], [1.0], [0.0]])
    dyad_x = np.zeros((3, 3, 2))
    dyad_x[0, 1] = [1.0, 2.0]
    return CovariateSet(node_x, dyad_x)


class TestObservedNetwork:
    def test_diagonal_zeroed_and_symmetry_checked(self):
        net = ObservedNetwork(np.array([[1, 1], [1, 0]]))
        assert net.adjacency[0, 0] == 0
        with pytest.raises(ValidationError):
            ObservedNetwork(np.array([[0, 1], [0, 0]]))

    def test_non_binary_rejected(self):
        with pytest.raises(ValidationError):
            ObservedNetwork(np.array([[0, 2], [2, 0]]))

    def test_default_observed_mask(self):
        net = ObservedNetwork(np.zeros((3, 3)))
        assert net.observed.sum() == 6 and not net.observed.diagonal().any()


class TestCovariates:
    def test_nonfinite_rejected_with_imputation_hint(self):
        node_x = np.array([[np.nan], [1.0]])
        with pytest.raises(ValidationError, match="imput"):
            CovariateSet(node_x, np.zeros((2, 2, 1)))

    def test_diagonal_nan_ignored(self):
        dx = np.full((2, 2, 1), np.nan)
        dx[0, 1] = dx[1, 0] = 1.0
        cov = CovariateSet(np.zeros((2, 1)), dx)
        assert np.all(np.isfinite(cov.dyad_x))


class TestLinearPredictor:
    def test_zero_coefficients(self, rng):
        cov = random_covariates(rng, 4)
        assert linear_predictor(RegressionCoefficients.zeros(1, 2), cov, 0, 3) == 0.0

    def test_hand_example(self):
        coef = RegressionCoefficients([0.0], [0.5], [1.0, -0.5])
        assert linear_predictor(coef, _hand_covariates(), 0, 1) == pytest.approx(0.5, abs=1e-15)

    def test_contract_violations(self):
        coef = RegressionCoefficients([0.0], [0.5], [1.0, -0.5])
        with pytest.raises(ValidationError):
            linear_predictor(coef, _hand_covariates(), 1, 1)
        with pytest.raises(ValidationError):
            linear_predictor(RegressionCoefficients([0.0], [0.0], [1.0]),
                             _hand_covariates(), 0, 1)

    def test_doubling_dyadic_block(self, rng):
        cov = random_covariates(rng, 5)
        coef = RegressionCoefficients([0.0], [0.0], rng.standard_normal(2))
        base = linear_predictor_matrix(coef, cov)
        coef.beta_d = 2 * coef.beta_d
        np.testing.assert_array_equal(linear_predictor_matrix(coef, cov), 2 * base)

    def test_matrix_matches_scalar(self, rng):
        cov = random_covariates(rng, 5)
        coef = RegressionCoefficients(rng.standard_normal(1), rng.standard_normal(1),
                                      rng.standard_normal(2))
        mat = linear_predictor_matrix(coef, cov)
        assert mat[2, 4] == pytest.approx(linear_predictor(coef, cov, 2, 4), abs=1e-14)


class TestSystematicMean:
    def test_zero_effects(self):
        add = AdditiveEffects.zeros(3)
        mult = MultiplicativeEffects.zeros(3, 2)
        assert systematic_mean(0.7, add, mult, 0, 1) == 0.7

    def test_empty_latent_space(self):
        add = AdditiveEffects.zeros(3)
        add.a[:] = [0.3, 0.1, 0.2]
        add.b[:] = [-0.4, 0.6, 0.0]
        mult = MultiplicativeEffects.zeros(3, 0)
        assert systematic_mean(0.2, add, mult, 0, 1) == 0.2 + 0.3 + 0.6

    def test_hand_example(self):
        add = AdditiveEffects.zeros(2)
        add.a[0], add.b[1] = 0.1, -0.1
        mult = MultiplicativeEffects(np.array([[1.0, 2.0], [0, 0]]),
                                     np.array([[0, 0], [3.0, -1.0]]))
        assert systematic_mean(0.0, add, mult, 0, 1) == pytest.approx(1.0, abs=1e-15)

    def test_centered_and_uncentered_agree(self, rng):
        for _ in range(20):
            n = 6
            cov = random_covariates(rng, n)
            coef = RegressionCoefficients(rng.standard_normal(1), rng.standard_normal(1),
                                          rng.standard_normal(2))
            add = AdditiveEffects(rng.standard_normal(n), rng.standard_normal(n),
                                  np.zeros(n), np.zeros(n), np.eye(2))
            add.recenter(coef, cov)
            mult = MultiplicativeEffects(rng.standard_normal((n, 2)),
                                         rng.standard_normal((n, 2)))
            m_unc = systematic_mean_matrix(coef, cov, add, mult)
            m_cen = centered_mean_matrix(coef.beta_d, cov.dyad_x, add.s, add.r,
                                         mult.u, mult.v)
            off = ~np.eye(n, dtype=bool)
            np.testing.assert_allclose(m_unc[off], m_cen[off], atol=1e-10)


class TestJointTieProbability:
    def test_zero_means(self):
        assert joint_tie_probability(0.0, 0.0) == 0.25

    def test_erf_oracle(self):
        oracle = _phi_erf(1.5) * _phi_erf(-0.3)
        assert oracle == pytest.approx(0.3565623, abs=1e-7)
        assert joint_tie_probability(1.5, -0.3) == pytest.approx(oracle, abs=1e-12)

    def test_correlated_orthant(self):
        # analytic orthant probability and a Monte Carlo rejection oracle
        analytic = 0.25 + math.asin(0.5) / (2 * math.pi)
        assert joint_tie_probability(0.0, 0.0, 0.5) == pytest.approx(analytic, abs=1e-9)
        g = np.random.default_rng(99)
        hits = 0
        for _ in range(10):
            e = g.standard_normal((10**6, 2))
            z2 = 0.5 * e[:, 0] + math.sqrt(0.75) * e[:, 1]
            hits += np.count_nonzero((e[:, 0] > 0) & (z2 > 0))
        mc = hits / 1e7
        assert abs(mc - analytic) < 4 * math.sqrt(analytic * (1 - analytic) / 1e7)

    @pytest.mark.parametrize("m1,m2,rho", [(0.4, -1.2, 0.3), (2.0, 1.0, -0.6),
                                           (-0.5, 0.7, 0.9)])
    def test_matches_bivariate_cdf(self, m1, m2, rho):
        ref = multivariate_normal([0, 0], [[1, rho], [rho, 1]]).cdf([m1, m2])
        assert joint_tie_probability(m1, m2, rho) == pytest.approx(ref, abs=1e-6)

    def test_invalid_rho(self):
        with pytest.raises(ValidationError):
            joint_tie_probability(0.0, 0.0, 1.0)

    @given(finite, finite)
    def test_exchange_symmetry(self, m1, m2):
        assert joint_tie_probability(m1, m2) == joint_tie_probability(m2, m1)

    @given(finite, finite, st.floats(0, 3), st.floats(-0.9, 0.9))
    @settings(max_examples=50, deadline=None)
    def test_monotone(self, m1, m2, step, rho):
        p = joint_tie_probability(m1, m2, rho)
        assert joint_tie_probability(m1 + step, m2, rho) >= p - 1e-12
        assert joint_tie_probability(m1, m2 + step, rho) >= p - 1e-12

    def test_limits(self):
        assert joint_tie_probability(40, 40) == pytest.approx(1.0)
        assert joint_tie_probability(-40, 40) == pytest.approx(0.0, abs=1e-300)
        assert joint_tie_probability(40, -40, 0.4) == pytest.approx(0.0, abs=1e-12)

    def test_matrix_form(self, rng):
        m = rng.standard_normal((4, 4))
        p = joint_tie_probability_matrix(m)
        np.testing.assert_array_equal(p, p.T)
        assert p[1, 2] == pytest.approx(joint_tie_probability(m[1, 2], m[2, 1]))
        assert np.all(p.diagonal() == 0)


def test_latent_consistency_predicate():
    net = ObservedNetwork(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]]))
    z = np.array([[0, 0.3, -1.0], [0.2, 0, 2.0], [0.5, -0.1, 0]])
    assert LatentUtilities(z).consistent_with(net)
    z[0, 1] = -0.3
    assert not LatentUtilities(z).consistent_with(net)
