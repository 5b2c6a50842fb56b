import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats
from scipy.special import expit

from app.core import icm
from app.core.errors import DimensionError, DomainError
from app.core.icm import (
    IcmConfig,
    SnpModelKind,
    TraitKind,
    TraitModelKind,
    allele_logits,
    categorical_probs,
    cutpoints,
    group_lasso_log_prior,
    group_lasso_term,
    init_snp_model,
    init_trait_model,
    snp_log_prob,
    snp_logits,
    snp_loglik,
    trait_features,
    trait_features_backward,
    trait_forward,
    trait_log_prob,
    trait_pass,
    trait_predict_mean,
)
from app.core.numerics.rng import RngStream


class TestIcmConfig:
    def test_defaults(self):
        c = IcmConfig()
        assert c.K == 3
        assert c.snp_hidden == (64, 64)
        assert c.trait_hidden == (32, 256)

    def test_hidden_sizes_from_text(self):
        assert IcmConfig(snp_hidden="16, 8").snp_hidden == (16, 8)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            IcmConfig(hidden=3)

    def test_non_positive_hidden_rejected(self):
        with pytest.raises(ValidationError):
            IcmConfig(trait_hidden=(0, 4))


class TestSnpModel:
    def test_log_prob_matches_binomial(self, rng):
        x = rng.integers(0, 3, 50)
        logit = 2.0 * rng.standard_normal(50)
        value, grad = snp_log_prob(x, logit)
        np.testing.assert_allclose(value, stats.binom.logpmf(x, 2, expit(logit)), rtol=1e-10)
        np.testing.assert_allclose(grad, x - 2.0 * expit(logit))

    def test_log_prob_extreme_logits_finite(self):
        value, _ = snp_log_prob(np.array([0, 2]), np.array([-800.0, 800.0]))
        assert np.all(np.isfinite(value))

    def test_invalid_genotype(self):
        with pytest.raises(DomainError):
            snp_log_prob(np.array([0, 3]), np.zeros(2))

    def test_logistic_fa_loglik(self, rng):
        z, w = rng.standard_normal((6, 2)), rng.standard_normal((4, 2))
        x = rng.integers(0, 3, (6, 4))
        params = init_snp_model(IcmConfig(K=2), RngStream(0))
        result = snp_loglik(x, z, w, params)
        expected = stats.binom.logpmf(x, 2, expit(z @ w.T)).sum()
        assert result.value == pytest.approx(expected)
        assert result.grad_z.shape == (6, 2) and result.grad_w.shape == (4, 2)

    def test_offset_shifts_logits(self, rng):
        z, w = rng.standard_normal((6, 2)), rng.standard_normal((4, 2))
        x = rng.integers(0, 3, (6, 4))
        offset = rng.standard_normal(4)
        params = init_snp_model(IcmConfig(K=2), RngStream(0))
        np.testing.assert_allclose(snp_logits(z, w, params, offset), z @ w.T + offset)
        result = snp_loglik(x, z, w, params, offset=offset)
        assert result.value == pytest.approx(stats.binom.logpmf(x, 2, expit(z @ w.T + offset)).sum())
        step = 1e-6
        for m in range(4):
            e = np.zeros(4)
            e[m] = step
            plus = snp_loglik(x, z, w, params, offset=offset + e).value
            minus = snp_loglik(x, z, w, params, offset=offset - e).value
            assert result.grad_offset[m] == pytest.approx((plus - minus) / (2 * step), rel=1e-5)

    def test_offset_shape_checked(self, rng):
        params = init_snp_model(IcmConfig(K=2), RngStream(0))
        with pytest.raises(DimensionError):
            snp_logits(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)), params, np.zeros(3))

    def test_no_offset_gradient_without_offset(self, rng):
        params = init_snp_model(IcmConfig(K=2), RngStream(0))
        result = snp_loglik(rng.integers(0, 3, (3, 2)), rng.standard_normal((3, 2)), rng.standard_normal((2, 2)), params)
        assert result.grad_offset is None

    def test_allele_logits(self):
        X = np.array([[0, 2, 1], [0, 2, 1], [0, 2, 1]], dtype=np.uint8)
        p = (np.array([0.0, 6.0, 3.0]) + 1.0) / 8.0
        np.testing.assert_allclose(allele_logits(X, block=2), np.log(p / (1 - p)))

    def test_latent_width_checked(self, rng):
        params = init_snp_model(IcmConfig(K=2), RngStream(0))
        with pytest.raises(DimensionError):
            snp_logits(rng.standard_normal((3, 3)), rng.standard_normal((2, 2)), params)

    def test_neural_loglik_independent_of_threads(self, rng, monkeypatch):
        monkeypatch.setattr(icm, "PAIR_ROWS_PER_CHUNK", 12)
        config = IcmConfig(K=2, snp_model=SnpModelKind.NEURAL, snp_hidden=(8, 4))
        params = init_snp_model(config, RngStream(1))
        z, w = rng.standard_normal((10, 2)), rng.standard_normal((4, 2))
        x = rng.integers(0, 3, (10, 4))
        one = snp_loglik(x, z, w, params, threads=1)
        many = snp_loglik(x, z, w, params, threads=4)
        assert one.value == many.value
        np.testing.assert_array_equal(one.grad_z, many.grad_z)
        np.testing.assert_array_equal(one.grad_w, many.grad_w)
        for name in one.grad_phi:
            np.testing.assert_array_equal(one.grad_phi[name], many.grad_phi[name])

    def test_neural_logits_match_loglik(self, rng):
        config = IcmConfig(K=2, snp_model=SnpModelKind.NEURAL, snp_hidden=(8, 4))
        params = init_snp_model(config, RngStream(1))
        z, w = rng.standard_normal((5, 2)), rng.standard_normal((3, 2))
        x = rng.integers(0, 3, (5, 3))
        value, _ = snp_log_prob(x, snp_logits(z, w, params))
        assert snp_loglik(x, z, w, params).value == pytest.approx(value.sum())


def _theta(kind=TraitKind.REAL_IMPLICIT, model=TraitModelKind.NEURAL, M=6, K=2, **kw):
    config = IcmConfig(K=K, trait_kind=kind, trait_model=model, trait_hidden=(5, 4), **kw)
    return init_trait_model(config, M, RngStream(2))


class TestTraitModel:
    def test_single_row_matches_batch(self, rng):
        theta = _theta()
        X, z, eps = rng.integers(0, 3, (4, 6)), rng.standard_normal((4, 2)), rng.standard_normal(4)
        y, h1 = trait_forward(X, z, eps, theta)
        y0, h10 = trait_forward(X[0], z[0], eps[0], theta)
        assert y0 == pytest.approx(y[0])
        np.testing.assert_allclose(h10, h1[0])

    def test_implicit_trait_depends_on_noise(self, rng):
        theta = _theta()
        x, z = rng.integers(0, 3, 6), rng.standard_normal(2)
        assert trait_forward(x, z, 0.0, theta)[0] != trait_forward(x, z, 3.0, theta)[0]

    def test_location_shift_adds_noise(self, rng):
        theta = _theta(TraitKind.REAL_LOCATION_SHIFT)
        X, z = rng.integers(0, 3, (4, 6)), rng.standard_normal((4, 2))
        noise = rng.standard_normal(4)
        score, _, _ = trait_pass(X, z, noise, theta)
        y, _ = trait_forward(X, z, noise, theta)
        np.testing.assert_allclose(y - score, noise)

    def test_categorical_levels(self, rng):
        theta = _theta(TraitKind.CATEGORICAL, num_levels=4)
        X, z = rng.integers(0, 3, (50, 6)), rng.standard_normal((50, 2))
        y, _ = trait_forward(X, z, rng.logistic(size=50), theta)
        assert set(np.unique(y)) <= {0.0, 1.0, 2.0, 3.0}

    def test_cutpoints(self):
        np.testing.assert_allclose(cutpoints(4), [-3.0, 0.0, 3.0])

    def test_categorical_probs_sum_to_one(self, rng):
        probs = categorical_probs(rng.standard_normal(10), 5)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert np.all(probs >= 0)

    def test_categorical_log_prob_matches_probs(self, rng):
        theta = _theta(TraitKind.CATEGORICAL, num_levels=3)
        score = rng.standard_normal(8)
        y = rng.integers(0, 3, 8).astype(float)
        value, _ = trait_log_prob(y, score, theta)
        probs = categorical_probs(score, 3)
        np.testing.assert_allclose(value, np.log(probs[np.arange(8), y.astype(int)]), rtol=1e-10)

    def test_categorical_log_prob_gradient(self, rng):
        theta = _theta(TraitKind.CATEGORICAL, num_levels=3)
        score = rng.standard_normal(6)
        y = np.array([0.0, 1.0, 2.0, 0.0, 1.0, 2.0])
        _, grad = trait_log_prob(y, score, theta)
        h = 1e-6
        numeric = (trait_log_prob(y, score + h, theta)[0] - trait_log_prob(y, score - h, theta)[0]) / (2 * h)
        np.testing.assert_allclose(grad, numeric, rtol=1e-5)

    def test_categorical_level_out_of_range(self):
        theta = _theta(TraitKind.CATEGORICAL, num_levels=2)
        with pytest.raises(DomainError):
            trait_log_prob(np.array([2.0]), np.zeros(1), theta)

    def test_implicit_trait_has_no_density(self):
        with pytest.raises(DomainError):
            trait_log_prob(np.zeros(2), np.zeros(2), _theta())

    def test_linear_model(self, rng):
        theta = _theta(TraitKind.REAL_LOCATION_SHIFT, TraitModelKind.LINEAR, M=3, K=1)
        theta.weights["coef"][:] = [1.0, -1.0, 0.5, 2.0]
        theta.weights["intercept"][:] = 0.5
        X, z = np.array([[1.0, 2.0, 0.0]]), np.array([[1.0]])
        score, h1, _ = trait_pass(X, z, np.zeros(1), theta)
        assert score[0] == pytest.approx(1.0 - 2.0 + 2.0 + 0.5)
        assert h1.shape == (1, 1)

    def test_features_ignore_noise(self, rng):
        theta = _theta()
        X, z = rng.integers(0, 3, (5, 6)), rng.standard_normal((5, 2))
        h1, _ = trait_features(X, z, theta)
        _, expected, _ = trait_pass(X, z, np.zeros(5), theta)
        np.testing.assert_array_equal(h1, expected)
        _, noisy, _ = trait_pass(X, z, np.full(5, 3.0), theta)
        assert not np.allclose(h1, noisy)

    def test_linear_features_are_covariates(self, rng):
        theta = _theta(TraitKind.REAL_IMPLICIT, TraitModelKind.LINEAR, M=3, K=1)
        X, z = rng.integers(0, 3, (4, 3)), rng.standard_normal((4, 1))
        h1, cache = trait_features(X, z, theta)
        np.testing.assert_array_equal(h1, np.concatenate([X, z], axis=1))
        grads = trait_features_backward(cache, np.ones_like(h1))
        assert all(not np.any(g) for g in grads.values())

    def test_features_backward_matches_finite_differences(self, rng):
        theta = _theta()
        X, z = rng.integers(0, 3, (5, 6)), rng.standard_normal((5, 2))
        h1, cache = trait_features(X, z, theta)
        proj = rng.standard_normal(h1.shape)
        grads = trait_features_backward(cache, proj)
        step = 1e-6
        W = theta.weights["W1"]
        for idx in [(0, 0), (3, 2), (7, 1)]:
            original = W[idx]
            W[idx] = original + step
            plus = (trait_features(X, z, theta)[0] * proj).sum()
            W[idx] = original - step
            minus = (trait_features(X, z, theta)[0] * proj).sum()
            W[idx] = original
            assert grads["W1"][idx] == pytest.approx((plus - minus) / (2 * step), rel=1e-5, abs=1e-8)

    def test_predict_mean_location_shift(self, rng):
        theta = _theta(TraitKind.REAL_LOCATION_SHIFT)
        X, z = rng.integers(0, 3, (4, 6)), rng.standard_normal((4, 2))
        score, _, _ = trait_pass(X, z, np.zeros(4), theta)
        np.testing.assert_allclose(trait_predict_mean(X, z, theta, RngStream(0)), score)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            trait_pass(np.zeros((3, 5)), np.zeros((3, 2)), np.zeros(3), _theta())


class TestGroupLasso:
    def test_term_value(self):
        groups = np.array([[3.0, 4.0], [0.0, 0.0]])
        value, grad = group_lasso_term(groups, 2.0)
        assert value == pytest.approx(-2.0 * np.sqrt(2) * 5.0)
        np.testing.assert_allclose(grad[0], -2.0 * np.sqrt(2) * np.array([0.6, 0.8]))
        np.testing.assert_array_equal(grad[1], 0.0)

    def test_batch_norm_parameters_excluded(self):
        theta = _theta(trait_batch_norm=True)
        _, grads = group_lasso_log_prior(theta, 1.0)
        for name in ("gamma1", "beta1", "gamma2", "beta2"):
            np.testing.assert_array_equal(grads[name], 0.0)

    def test_rows_after_snps_get_normal_prior(self):
        theta = _theta(M=3, K=2)
        _, grads = group_lasso_log_prior(theta, 1.0)
        np.testing.assert_allclose(grads["W1"][3:], -theta.weights["W1"][3:])

    def test_linear_groups_are_coefficients(self):
        theta = _theta(TraitKind.REAL_LOCATION_SHIFT, TraitModelKind.LINEAR, M=3, K=1)
        theta.weights["coef"][:] = [2.0, -1.0, 0.0, 1.0]
        value, grads = group_lasso_log_prior(theta, 0.5)
        expected = -0.5 * 3.0 - 0.5 * 1.0 - np.log(2 * np.pi) - 0.0
        assert value == pytest.approx(expected)
        np.testing.assert_allclose(grads["coef"], [-0.5, 0.5, 0.0, -1.0])
