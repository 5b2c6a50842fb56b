import math

import numpy as np
import pytest
from scipy import stats

from app.core.errors import DimensionError, DomainError
from app.core.icm import IcmConfig, TraitKind, TraitModelKind, init_trait_model
from app.core.numerics.rng import RngStream
from app.core.numerics.stats import ols_ttest
from app.services import assoc
from app.services.assoc import (
    CHI2_MEDIAN,
    AssociationResult,
    expected_false_positives,
    genomic_control,
    nn_snp_scores,
    per_snp_ttest,
    precision,
)
from app.services.simgen import Family, SimConfig, simulate_dataset


class TestPerSnpTtest:
    def test_matches_full_regression(self, rng):
        N = 80
        X = rng.integers(0, 3, (N, 6)).astype(np.uint8)
        C = rng.standard_normal((N, 2))
        y = 0.8 * X[:, 0] + C @ [1.0, -0.5] + rng.standard_normal(N)
        result = per_snp_ttest(y, X, C, "icm")
        for m in range(6):
            ref = ols_ttest(y, np.column_stack([np.ones(N), X[:, m], C]))
            assert result.statistic[m] == pytest.approx(ref.t[1], rel=1e-8)
            assert result.p_value[m] == pytest.approx(ref.p_value[1], rel=1e-6, abs=1e-300)

    def test_threads_do_not_change_result(self, rng, monkeypatch):
        monkeypatch.setattr(assoc, "SNP_COLUMNS_PER_TASK", 3)
        X = rng.integers(0, 3, (40, 10)).astype(np.uint8)
        y = rng.standard_normal(40)
        one = per_snp_ttest(y, X, None, "uncorrected", threads=1)
        many = per_snp_ttest(y, X, None, "uncorrected", threads=4)
        np.testing.assert_array_equal(one.p_value, many.p_value)

    def test_constant_column_is_degenerate(self, rng):
        X = rng.integers(0, 3, (30, 3)).astype(np.uint8)
        X[:, 1] = 2
        result = per_snp_ttest(rng.standard_normal(30), X, None, "uncorrected")
        assert result.degenerate.tolist() == [False, True, False]
        assert result.p_value[1] == 1.0

    def test_constant_trait(self, rng):
        X = rng.integers(0, 3, (30, 4)).astype(np.uint8)
        result = per_snp_ttest(np.full(30, 3.0), X, None, "uncorrected")
        np.testing.assert_array_equal(result.p_value, 1.0)

    def test_length_mismatch(self, rng):
        with pytest.raises(DimensionError):
            per_snp_ttest(np.zeros(5), np.zeros((6, 2)), None, "uncorrected")

    def test_no_degrees_of_freedom(self):
        with pytest.raises(DimensionError):
            per_snp_ttest(np.arange(3.0), np.eye(3), np.ones((3, 1)) * [[1.0], [2.0], [3.0]], "icm")

    def test_pca_rank_out_of_range(self, rng):
        with pytest.raises(DomainError):
            assoc.test_pca_baseline(np.zeros(5), np.zeros((5, 3)), K_pc=4)

    def test_at_threshold(self):
        result = AssociationResult(np.zeros(3), np.array([0.001, 0.01, 0.5]), "x")
        assert result.significant_set.tolist() == [0]
        assert result.at_threshold(0.05).significant_set.tolist() == [0, 1]


class TestMetrics:
    def test_expected_false_positives(self):
        assert expected_false_positives(100_000 - 10, 0.0025) == pytest.approx(249.975)
        assert round(expected_false_positives(100_000 - 10, 0.0025)) == 250

    def test_precision(self):
        result = AssociationResult(np.zeros(6), np.array([0.0, 0.0, 1.0, 1.0, 1.0, 0.0]), "x")
        assert precision(result, {0, 1}) == pytest.approx(2 / 3)

    def test_precision_undefined_without_discoveries(self):
        result = AssociationResult(np.zeros(3), np.ones(3), "x")
        assert math.isnan(precision(result, {0}))

    def test_nn_ranking_selects_top_k(self):
        theta = init_trait_model(
            IcmConfig(K=1, trait_model=TraitModelKind.LINEAR, trait_kind=TraitKind.REAL_LOCATION_SHIFT), 5, RngStream(0)
        )
        theta.weights["coef"][:5] = [0.1, -3.0, 0.0, 2.0, 0.5]
        np.testing.assert_allclose(nn_snp_scores(theta), [0.1, 3.0, 0.0, 2.0, 0.5])
        result = assoc.test_nn_ranking(theta, top_k=2)
        assert result.significant_set.tolist() == [1, 3]
        assert result.method == "nn"


class TestGenomicControl:
    def _result(self, chi2):
        p = stats.chi2.sf(chi2, 1)
        return AssociationResult(np.sqrt(chi2), p, "x")

    def test_calibrated_statistics(self):
        chi2 = stats.chi2.rvs(1, size=20_000, random_state=1)
        lam, corrected = genomic_control(self._result(chi2))
        assert lam == pytest.approx(1.0, abs=0.05)
        if lam <= 1.0:
            np.testing.assert_array_equal(corrected.p_value, self._result(chi2).p_value)

    def test_inflation_removed(self):
        chi2 = 2.0 * stats.chi2.rvs(1, size=20_000, random_state=2)
        lam, corrected = genomic_control(self._result(chi2))
        assert lam == pytest.approx(2.0, rel=0.05)
        corrected_chi2 = stats.chi2.isf(corrected.p_value, 1)
        assert np.median(corrected_chi2) == pytest.approx(CHI2_MEDIAN, rel=1e-6)
        assert corrected.lambda_gc == lam

    def test_never_deflates(self):
        chi2 = 0.5 * stats.chi2.rvs(1, size=1000, random_state=3)
        lam, corrected = genomic_control(self._result(chi2))
        assert lam < 1.0
        np.testing.assert_array_equal(corrected.p_value, stats.chi2.sf(chi2, 1))

    def test_too_few_pvalues(self):
        lam, _ = genomic_control(AssociationResult(np.zeros(50), np.full(50, 0.5), "x"))
        assert math.isnan(lam)


class TestNullCalibration:
    @pytest.fixture(scope="class")
    def null_data(self):
        return simulate_dataset(SimConfig(family=Family.UNSTRUCTURED, M=5000, N=500, n_causal=0), seed=17)

    @pytest.mark.parametrize("method", ["uncorrected", "pca"])
    def test_discovery_rate(self, null_data, method):
        X, y = null_data.genotypes, null_data.traits
        if method == "pca":
            result = assoc.test_pca_baseline(y, X, 3, rng=RngStream(1))
        else:
            result = assoc.test_uncorrected(y, X)
        rate = result.significant_set.size / X.shape[1]
        assert 0.00125 <= rate <= 0.005

    @pytest.mark.slow
    def test_corrected_discovery_rate(self, null_data):
        from app.core.lfvi.stage1 import stage1_fit
        from app.core.lfvi.state import Stage1Config

        X, y = null_data.genotypes, null_data.traits
        state = stage1_fit(X, IcmConfig(K=3), Stage1Config(epochs=20, seed=17))
        rate = assoc.test_corrected(y, X, state.z_mean).significant_set.size / X.shape[1]
        assert 0.00125 <= rate <= 0.005
