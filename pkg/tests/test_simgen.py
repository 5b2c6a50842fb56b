import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import DimensionError, DomainError
from app.core.numerics.rng import RngStream
from app.services.simgen import (
    FREQ_EPS,
    Family,
    SimConfig,
    balding_nichols,
    make_structure,
    membership_sparsity,
    preset,
    simulate_dataset,
    simulate_genotypes,
    simulate_traits,
)


class TestStructure:
    @pytest.mark.parametrize("family", list(Family))
    def test_shapes_and_frequency_range(self, family):
        s = make_structure(family, 0.5, 200, 40, 3, RngStream(1))
        assert s.Gamma.shape[0] == 200 and s.S.shape[1] == 40
        assert s.Gamma.shape[1] == s.S.shape[0]
        assert s.labels.shape == (40,)
        pi = s.frequencies()
        assert pi.min() >= FREQ_EPS and pi.max() <= 1 - FREQ_EPS

    def test_bn_memberships_are_one_hot(self):
        s = make_structure(Family.BN_SURROGATE, 1.0, 50, 500, 3, RngStream(2))
        np.testing.assert_array_equal(s.S.sum(axis=0), 1.0)
        np.testing.assert_array_equal(s.S.argmax(axis=0), s.labels)
        # proporciones 60/210, 60/210, 90/210
        np.testing.assert_allclose(np.bincount(s.labels) / 500, [0.286, 0.286, 0.429], atol=0.06)

    def test_psd_columns_on_simplex(self):
        s = make_structure(Family.PSD, 0.1, 50, 100, 3, RngStream(3))
        np.testing.assert_allclose(s.S.sum(axis=0), 1.0)

    @pytest.mark.parametrize("family", [Family.SPATIAL, Family.PC_SURROGATE])
    def test_spatial_last_row_is_ones(self, family):
        s = make_structure(family, 0.1, 50, 100, 3, RngStream(4))
        np.testing.assert_array_equal(s.S[2], 1.0)
        np.testing.assert_array_equal(s.Gamma[:, 2], 0.05)
        assert s.S[:2].min() >= 0 and s.S[:2].max() <= 1
        assert s.Gamma[:, :2].max() <= 0.45

    def test_unstructured(self):
        s = make_structure(Family.UNSTRUCTURED, 1.0, 50, 20, 3, RngStream(5))
        assert s.S.shape == (1, 20)
        np.testing.assert_array_equal(s.labels, 0)

    def test_psd_sparsity_monotone(self):
        sparse = make_structure(Family.PSD, 0.01, 10, 2000, 3, RngStream(6))
        dense = make_structure(Family.PSD, 1.0, 10, 2000, 3, RngStream(6))
        assert membership_sparsity(sparse.S) > membership_sparsity(dense.S)

    def test_balding_nichols_mean(self):
        p = np.full(20_000, 0.3)
        F = np.full(20_000, 0.1)
        draws = balding_nichols(p, F, 2, RngStream(7))
        assert draws.shape == (20_000, 2)
        assert draws.mean() == pytest.approx(0.3, abs=0.01)
        # varianza F p (1 - p)
        assert draws.var() == pytest.approx(0.1 * 0.3 * 0.7, rel=0.05)

    @pytest.mark.parametrize("a", [0.0, -1.0])
    def test_invalid_sparsity(self, a):
        with pytest.raises(DomainError):
            make_structure(Family.PSD, a, 10, 10, 3, RngStream(0))

    def test_bn_requires_three_populations(self):
        with pytest.raises(DomainError):
            make_structure(Family.BN_SURROGATE, 1.0, 10, 10, 2, RngStream(0))

    def test_invalid_dimensions(self):
        with pytest.raises(DimensionError):
            make_structure(Family.PSD, 1.0, 0, 10, 3, RngStream(0))


class TestGenotypes:
    def test_values_and_dtype(self):
        s = make_structure(Family.PSD, 0.5, 100, 30, 3, RngStream(1))
        X = simulate_genotypes(s, RngStream(2))
        assert X.dtype == np.uint8 and X.shape == (30, 100)
        assert set(np.unique(X)) <= {0, 1, 2}

    def test_independent_of_threads(self):
        s = make_structure(Family.SPATIAL, 0.5, 2500, 20, 3, RngStream(1))
        one = simulate_genotypes(s, RngStream(2), threads=1)
        many = simulate_genotypes(s, RngStream(2), threads=4)
        np.testing.assert_array_equal(one, many)

    def test_mean_matches_frequencies(self):
        s = make_structure(Family.UNSTRUCTURED, 1.0, 200, 4000, 1, RngStream(3))
        X = simulate_genotypes(s, RngStream(4))
        np.testing.assert_allclose(X.mean(axis=0) / 2, s.Gamma[:, 0], atol=0.04)


class TestTraits:
    def test_causal_prefix(self, bn_dataset):
        assert list(bn_dataset.causal_set) == [0, 1, 2, 3, 4]
        np.testing.assert_array_equal(bn_dataset.beta[5:], 0.0)

    def test_group_offsets_and_noise(self, bn_dataset):
        assert set(np.unique(bn_dataset.lambda_)) <= {1.0, 2.0, 3.0}
        assert np.all(bn_dataset.sigma > 0)
        # sigma constante dentro de cada grupo
        for level in np.unique(bn_dataset.lambda_):
            assert len(np.unique(bn_dataset.sigma[bn_dataset.lambda_ == level])) == 1

    def test_noiseless_trait_is_linear(self, bn_dataset):
        X, S = bn_dataset.genotypes, bn_dataset.structure.S
        y, beta, lam, sigma = simulate_traits(X, S, 3, RngStream(1), offsets=False, noise=False)
        np.testing.assert_allclose(y, X[:, :3] @ beta[:3])
        np.testing.assert_array_equal(sigma, 0.0)

    def test_no_causal_snps(self, bn_dataset):
        _, beta, _, _ = simulate_traits(bn_dataset.genotypes, bn_dataset.structure.S, 0, RngStream(1))
        np.testing.assert_array_equal(beta, 0.0)

    def test_too_many_causal(self, bn_dataset):
        with pytest.raises(DomainError):
            simulate_traits(bn_dataset.genotypes, bn_dataset.structure.S, 301, RngStream(1))

    def test_single_group_when_unstructured(self):
        data = simulate_dataset(SimConfig(family=Family.UNSTRUCTURED, M=50, N=30, n_causal=0), seed=1)
        np.testing.assert_array_equal(data.lambda_, 1.0)


class TestDataset:
    def test_deterministic(self):
        config = SimConfig(M=80, N=30)
        a = simulate_dataset(config, seed=5)
        b = simulate_dataset(config, seed=5)
        np.testing.assert_array_equal(a.genotypes, b.genotypes)
        np.testing.assert_array_equal(a.traits, b.traits)

    def test_seed_changes_output(self):
        config = SimConfig(M=80, N=30)
        assert not np.array_equal(simulate_dataset(config, 1).genotypes, simulate_dataset(config, 2).genotypes)

    def test_presets(self):
        c = preset("tgp", a=1.0)
        assert c.family == Family.PC_SURROGATE
        assert (c.M, c.N) == (5000, 500)
        assert preset("hapmap", full_scale=True).M == 100_000

    def test_unknown_preset(self):
        with pytest.raises(DomainError):
            preset("nope")

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SimConfig(family=Family.BN_SURROGATE, K_pop=2)
        with pytest.raises(ValidationError):
            SimConfig(M=5, n_causal=6)
