import numpy as np
import pytest
from scipy import stats
from sklearn.metrics import adjusted_rand_score

from app.core.errors import DimensionError, DomainError, NumericError, SingularityError
from app.core.numerics.gradcheck import gradient_check, numeric_gradient, relative_errors
from app.core.numerics.mlp import MlpSpec, he_init, mlp_backward, mlp_forward
from app.core.numerics.optim import AdamState, adam_step
from app.core.numerics.rng import (
    Beta,
    Dirichlet,
    Gamma,
    InverseGamma,
    Normal,
    RngStream,
    Uniform,
    sample,
)
from app.core.numerics.stats import checked_qr, kmeans, ols_ttest, top_principal_components


class TestRngStream:
    def test_same_key_same_draws(self):
        a = RngStream(7).spawn(1, 2).generator.random(5)
        b = RngStream(7).spawn(1, 2).generator.random(5)
        np.testing.assert_array_equal(a, b)

    def test_children_independent_of_consumption_order(self):
        root = RngStream(11)
        first = root.spawn(0).generator.random(3)
        root.generator.random(1000)
        again = root.spawn(0).generator.random(3)
        np.testing.assert_array_equal(first, again)

    def test_different_keys_differ(self):
        a = RngStream(7).spawn(1).generator.random(5)
        b = RngStream(7).spawn(2).generator.random(5)
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("seed", [-1, 2**64])
    def test_seed_out_of_range(self, seed):
        with pytest.raises(DomainError):
            RngStream(seed)

    def test_position_restores_stream(self):
        s = RngStream(3)
        saved = s.position
        x = s.generator.random(4)
        s.position = saved
        np.testing.assert_array_equal(s.generator.random(4), x)


class TestSamplers:
    N = 200_000

    def test_beta_moments(self):
        x = sample(Beta(2.0, 3.0), RngStream(1), self.N)
        assert x.mean() == pytest.approx(0.4, abs=0.005)
        assert x.var() == pytest.approx(0.04, abs=0.002)

    def test_beta_tiny_shapes_stay_in_unit_interval(self):
        x = sample(Beta(0.01, 0.01), RngStream(2), 10_000)
        assert np.all(np.isfinite(x))
        assert np.all((x >= 0) & (x <= 1))
        # masa concentrada en los extremos
        assert np.mean((x < 0.01) | (x > 0.99)) > 0.9

    def test_dirichlet_moments(self):
        alpha = (0.5, 1.0, 2.0)
        x = sample(Dirichlet(alpha), RngStream(3), self.N)
        assert x.shape == (self.N, 3)
        np.testing.assert_allclose(x.sum(axis=1), 1.0)
        np.testing.assert_allclose(x.mean(axis=0), np.array(alpha) / 3.5, atol=0.005)

    def test_dirichlet_small_concentration(self):
        x = sample(Dirichlet((0.01, 0.01, 0.01)), RngStream(4), 5000)
        assert np.all(np.isfinite(x))
        np.testing.assert_allclose(x.sum(axis=1), 1.0)
        assert x.max(axis=1).mean() > 0.9

    def test_inverse_gamma_mean(self):
        x = sample(InverseGamma(3.0, 1.0), RngStream(5), self.N)
        assert x.mean() == pytest.approx(0.5, abs=0.01)

    def test_gamma_small_shape_mean(self):
        x = sample(Gamma(0.3, 2.0), RngStream(6), self.N)
        assert x.mean() == pytest.approx(0.6, abs=0.02)

    def test_normal_and_uniform(self):
        n = sample(Normal(1.0, 2.0), RngStream(7), self.N)
        u = sample(Uniform(-1.0, 3.0), RngStream(8), self.N)
        assert n.mean() == pytest.approx(1.0, abs=0.02)
        assert n.std() == pytest.approx(2.0, abs=0.02)
        assert u.min() >= -1.0 and u.max() < 3.0

    def test_scalar_draw(self):
        assert isinstance(sample(Normal(), RngStream(9)), float)

    @pytest.mark.parametrize(
        "dist",
        [Uniform(1.0, 1.0), Normal(0.0, -1.0), Gamma(0.0), Beta(1.0, 0.0), Dirichlet((1.0,)), InverseGamma(1.0, -1.0)],
    )
    def test_invalid_parameters(self, dist):
        with pytest.raises(DomainError):
            sample(dist, RngStream(0), 3)

    def test_binomial_genotype_pmf(self):
        pi = 0.3
        u = RngStream(10).generator.random((2, 50_000))
        x = (u[0] < pi).astype(int) + (u[1] < pi)
        observed = np.bincount(x, minlength=3)
        expected = x.size * stats.binom.pmf([0, 1, 2], 2, pi)
        assert stats.chisquare(observed, expected).pvalue > 0.01


def _small_spec(**kw):
    return MlpSpec(input_dim=4, hidden_dims=(5, 3), output_dim=2, **kw)


class TestMlp:
    def test_forward_shapes(self):
        spec = _small_spec(skip_inputs_to_output=True, skip_range=(1, 3))
        params = he_init(spec, RngStream(0))
        out, h1, _ = mlp_forward(params, spec, np.ones((6, 4)))
        assert out.shape == (6, 2)
        assert h1.shape == (6, 5)
        assert params.weights["W3"].shape == (3 + 2, 2)

    def test_he_init_bounds(self):
        spec = MlpSpec(input_dim=50, hidden_dims=(20, 10), output_dim=1)
        params = he_init(spec, RngStream(1))
        assert np.abs(params.weights["W1"]).max() <= np.sqrt(6 / 50)
        np.testing.assert_array_equal(params.weights["b1"], 0.0)

    def test_wrong_input_width(self):
        spec = _small_spec()
        with pytest.raises(DimensionError):
            mlp_forward(he_init(spec, RngStream(0)), spec, np.ones((2, 3)))

    def test_bad_skip_range(self):
        with pytest.raises(DimensionError):
            MlpSpec(input_dim=4, hidden_dims=(5, 3), output_dim=1, skip_inputs_to_output=True, skip_range=(2, 6))

    def test_batch_norm_single_row_uses_running_stats(self):
        spec = _small_spec(use_batch_norm=True)
        params = he_init(spec, RngStream(2))
        x = RngStream(3).generator.standard_normal((1, 4))
        train_out, _, _ = mlp_forward(params, spec, x, training=True)
        eval_out, _, _ = mlp_forward(params, spec, x, training=False)
        np.testing.assert_array_equal(train_out, eval_out)

    def test_batch_norm_updates_running_moments(self):
        spec = _small_spec(use_batch_norm=True)
        params = he_init(spec, RngStream(2))
        x = 3.0 + RngStream(3).generator.standard_normal((16, 4))
        mlp_forward(params, spec, x, training=True)
        assert not np.allclose(params.buffers["mean1"], 0.0)

    def test_backward_matches_finite_differences(self):
        spec = _small_spec(use_batch_norm=True, skip_inputs_to_output=True)
        gen = np.random.default_rng(0)
        params = he_init(spec, RngStream(4))
        params.weights["beta1"] = gen.normal(0, 0.3, 5)
        params.weights["beta2"] = gen.normal(0, 0.3, 3)
        x = gen.standard_normal((10, 4))
        proj = gen.standard_normal((10, 2))

        def loss(p):
            out, _, cache = mlp_forward(params, spec, x, training=True)
            grads, _ = mlp_backward(cache, proj)
            return float((out * proj).sum()), grads

        assert gradient_check(loss, params.weights) < 1e-5

    def test_backward_rejects_bad_gradient_shape(self):
        spec = _small_spec()
        params = he_init(spec, RngStream(0))
        _, _, cache = mlp_forward(params, spec, np.ones((3, 4)))
        with pytest.raises(DimensionError):
            mlp_backward(cache, np.ones((3, 1)))


class TestAdam:
    def test_minimizes_quadratic(self):
        params = {"x": np.array([3.0, -2.0])}
        state = AdamState(step_size=0.1)
        for _ in range(500):
            adam_step(state, params, {"x": 2.0 * params["x"]})
        np.testing.assert_allclose(params["x"], 0.0, atol=1e-2)

    def test_first_step_has_step_size_magnitude(self):
        params = {"x": np.array([1.0, 1.0])}
        adam_step(AdamState(step_size=0.005), params, {"x": np.array([10.0, -0.1])})
        np.testing.assert_allclose(params["x"], [0.995, 1.005], rtol=1e-6)

    def test_sparse_rows_only_touch_selected_rows(self):
        params = {"w": np.ones((5, 2))}
        state = AdamState(step_size=0.1)
        adam_step(state, params, {"w": np.ones((2, 2))}, rows=np.array([1, 3]))
        np.testing.assert_array_equal(params["w"][[0, 2, 4]], 1.0)
        assert np.all(params["w"][[1, 3]] < 1.0)
        np.testing.assert_array_equal(state.row_steps["w"], [0, 1, 0, 1, 0])

    def test_sparse_bias_correction_per_row(self):
        # una fila vista por primera vez en el paso 3 se mueve como en un primer paso
        params = {"w": np.zeros((2, 1))}
        state = AdamState(step_size=0.1)
        for _ in range(2):
            adam_step(state, params, {"w": np.ones((1, 1))}, rows=np.array([0]))
        adam_step(state, params, {"w": np.ones((1, 1))}, rows=np.array([1]))
        assert params["w"][1, 0] == pytest.approx(-0.1, rel=1e-6)

    def test_non_finite_gradient(self):
        with pytest.raises(NumericError):
            adam_step(AdamState(), {"x": np.zeros(2)}, {"x": np.array([np.nan, 0.0])})

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step(AdamState(), {"x": np.zeros(2)}, {"x": np.zeros(3)})


class TestGradcheck:
    def test_exact_gradient(self):
        def loss(p):
            return float((p["a"] ** 3).sum()), {"a": 3.0 * p["a"] ** 2}

        assert gradient_check(loss, {"a": np.array([0.5, -1.5, 2.0])}) < 1e-7

    def test_wrong_gradient_detected(self):
        def loss(p):
            return float((p["a"] ** 2).sum()), {"a": p["a"]}

        assert gradient_check(loss, {"a": np.array([1.0, 2.0])}) > 0.1

    def test_non_contiguous_parameter(self):
        C = np.arange(6.0).reshape(3, 2) + 1.0

        def loss(p):
            return float((p["a"] * C).sum()), {"a": C.copy()}

        a = np.array([[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]]).T
        assert not a.flags["C_CONTIGUOUS"]
        numeric = numeric_gradient(loss, {"a": a})["a"]
        np.testing.assert_allclose(numeric, C, rtol=1e-6)
        assert gradient_check(loss, {"a": a}) < 1e-6

    def test_relative_error_floor(self):
        assert relative_errors(np.zeros(2), np.zeros(2)).max() == 0.0


class TestStats:
    def test_exact_pca_matches_svd(self, rng):
        X = rng.standard_normal((40, 30))
        components, scores = top_principal_components(X, 3)
        Xc = X - X.mean(axis=0)
        _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
        for k in range(3):
            assert abs(components[k] @ Vt[k]) == pytest.approx(1.0, abs=1e-8)
        np.testing.assert_allclose(np.linalg.norm(scores, axis=0), S[:3], rtol=1e-8)

    def test_randomized_pca_matches_exact(self, rng):
        rows, cols = 600, 700
        U = np.linalg.qr(rng.standard_normal((rows, 3)))[0]
        V = np.linalg.qr(rng.standard_normal((cols, 3)))[0]
        X = (U * [400.0, 250.0, 150.0]) @ V.T + rng.standard_normal((rows, cols))
        components, _ = top_principal_components(X, 3, RngStream(0))
        _, _, Vt = np.linalg.svd(X - X.mean(axis=0), full_matrices=False)
        for k in range(3):
            assert abs(components[k] @ Vt[k]) > 0.999

    def test_pca_zero_components(self, rng):
        components, scores = top_principal_components(rng.standard_normal((5, 4)), 0)
        assert components.shape == (0, 4) and scores.shape == (5, 0)

    def test_pca_rank_out_of_range(self, rng):
        with pytest.raises(DimensionError):
            top_principal_components(rng.standard_normal((5, 4)), 6)

    def test_kmeans_recovers_clusters(self, rng):
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        labels = np.repeat(np.arange(3), 30)
        points = centers[labels] + rng.standard_normal((90, 2))
        assert adjusted_rand_score(labels, kmeans(points, 3, RngStream(1))) == 1.0

    def test_kmeans_too_many_clusters(self):
        with pytest.raises(DomainError):
            kmeans(np.zeros((2, 2)), 3, RngStream(0))

    def test_ols_matches_linregress(self, rng):
        x = rng.standard_normal(50)
        y = 0.3 * x + rng.standard_normal(50)
        res = ols_ttest(y, np.column_stack([np.ones(50), x]))
        ref = stats.linregress(x, y)
        assert res.coef[1] == pytest.approx(ref.slope)
        assert res.p_value[1] == pytest.approx(ref.pvalue)
        assert res.df == 48

    def test_ols_null_pvalues_uniform(self, rng):
        pvalues = []
        for _ in range(1000):
            x = rng.standard_normal(40)
            y = rng.standard_normal(40)
            pvalues.append(ols_ttest(y, np.column_stack([np.ones(40), x])).p_value[1])
        assert stats.kstest(pvalues, "uniform").statistic < 0.05

    def test_singular_design_names_column(self, rng):
        x = rng.standard_normal(20)
        with pytest.raises(SingularityError) as err:
            checked_qr(np.column_stack([np.ones(20), x, 2.0 * x]))
        assert err.value.column == 2
