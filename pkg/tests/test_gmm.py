"""Analytic mixture oracle: closed forms, finite differences, Gaussian closure."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pursamere.gmm import (
    FIG1_SPEC,
    GmmScore,
    GmmSpec,
    ere_quadrature,
    ere_single_gaussian,
    exact_ere,
    exact_score,
    grid_argmax,
    grid_local_maxima,
    mixture_log_density,
    score_jacobian,
    smoothed_log_density,
    tweedie_denoiser,
)

STD_NORMAL = GmmSpec([1.0], [[0.0]], [1.0])
K1 = GmmSpec([1.0], [[0.5]], [0.1])
MIX2D = GmmSpec([0.2, 0.5, 0.3], [[0.2, 0.3], [0.6, 0.7], [0.8, 0.1]], [0.1, 0.15, 0.08])


class TestSpec:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            GmmSpec([0.5, 0.4], [[0.0], [1.0]], [1.0, 1.0])

    def test_positive_weights_and_stds(self):
        with pytest.raises(ValueError):
            GmmSpec([1.0, 0.0], [[0.0], [1.0]], [1.0, 1.0])
        with pytest.raises(ValueError):
            GmmSpec([1.0], [[0.0]], [0.0])

    def test_json_roundtrip(self):
        assert GmmSpec.from_json(MIX2D.to_json()).to_dict() == MIX2D.to_dict()
        assert set(MIX2D.to_dict()) == {"weights", "means", "stds"}


class TestSmoothedDensity:
    def test_standard_normal_peak(self):
        assert smoothed_log_density(STD_NORMAL, [0.0], 0.0) == pytest.approx(-0.918939, abs=1e-6)

    def test_variance_adds(self):
        expected = np.log(1 / np.sqrt(4 * np.pi))
        assert smoothed_log_density(STD_NORMAL, [0.0], 1.0) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(-1.265512, abs=1e-6)

    def test_zero_noise_matches_plain_density(self):
        ys = np.linspace(-0.5, 1.5, 201)[:, None]
        np.testing.assert_allclose(smoothed_log_density(FIG1_SPEC, ys, 0.0),
                                   mixture_log_density(FIG1_SPEC, ys, np.asarray(FIG1_SPEC.stds) ** 2),
                                   atol=1e-12)

    def test_gaussian_closure(self):
        sigma = 0.07
        g = np.stack(np.meshgrid(np.linspace(0, 1, 21), np.linspace(0, 1, 21)), -1).reshape(-1, 2)
        np.testing.assert_allclose(smoothed_log_density(MIX2D, g, sigma),
                                   mixture_log_density(MIX2D, g, np.asarray(MIX2D.stds) ** 2 + sigma**2),
                                   atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            smoothed_log_density(K1, [np.nan], 0.1)


class TestScore:
    def test_vanishes_at_mode(self):
        assert exact_score(K1, [0.5], 0.1)[0] == 0.0

    def test_k1_value(self):
        assert exact_score(K1, [0.6], 0.1)[0] == pytest.approx(-5.0, rel=1e-12)

    @pytest.mark.parametrize("sigma", [0.0, 0.05, 0.3])
    def test_matches_fd_of_log_density(self, sigma):
        rng = np.random.default_rng(0)
        h = 1e-6
        for y in rng.uniform(0, 1, (10, 2)):
            fd = np.array([(smoothed_log_density(MIX2D, y + h * e, sigma)
                            - smoothed_log_density(MIX2D, y - h * e, sigma)) / (2 * h) for e in np.eye(2)])
            np.testing.assert_allclose(exact_score(MIX2D, y, sigma), fd, rtol=1e-6, atol=1e-6)

    def test_jacobian_matches_fd_and_is_symmetric(self):
        rng = np.random.default_rng(1)
        h = 1e-6
        for y in rng.uniform(0, 1, (5, 2)):
            j = score_jacobian(MIX2D, y, 0.05)
            fd = np.stack([(exact_score(MIX2D, y + h * e, 0.05) - exact_score(MIX2D, y - h * e, 0.05)) / (2 * h)
                           for e in np.eye(2)], axis=1)
            np.testing.assert_allclose(j, fd, rtol=1e-5, atol=1e-4)
            np.testing.assert_allclose(j, j.T, atol=1e-10)

    def test_adapter_vjp(self):
        rng = np.random.default_rng(2)
        y = rng.uniform(0, 1, (6, 2))
        v = rng.standard_normal((6, 2))
        adapter = GmmScore(MIX2D)
        expected = np.stack([score_jacobian(MIX2D, yi, 0.1).T @ vi for yi, vi in zip(y, v)])
        np.testing.assert_allclose(adapter.score_vjp(y, 0.1, v), expected, rtol=1e-10, atol=1e-12)


class TestTweedie:
    def test_shrinkage(self):
        assert tweedie_denoiser(STD_NORMAL, [2.0], 1.0)[0] == pytest.approx(1.0, abs=1e-12)

    def test_fixed_point_at_mean(self):
        np.testing.assert_allclose(tweedie_denoiser(K1, [0.5], 0.2), [0.5], atol=1e-15)

    def test_mmse_beats_identity(self):
        rng = np.random.default_rng(3)
        sigma = 0.1
        x = FIG1_SPEC.sample(10**5, rng)
        y = x + sigma * rng.standard_normal(x.shape)
        mse_tweedie = np.mean(np.sum((tweedie_denoiser(FIG1_SPEC, y, sigma) - x) ** 2, axis=1))
        mse_identity = np.mean(np.sum((y - x) ** 2, axis=1))
        assert mse_tweedie <= mse_identity


class TestExactEre:
    def test_closed_form_values(self):
        assert ere_single_gaussian([0.5], 0.1, [0.5], 0.1) == pytest.approx(0.25, abs=1e-12)
        assert ere_single_gaussian([0.5], 0.1, [0.6], 0.1) == pytest.approx(0.50, abs=1e-12)

    @pytest.mark.parametrize("x,expected", [(0.5, 0.25), (0.6, 0.50)])
    def test_mc_matches_closed_form(self, x, expected):
        value, se = exact_ere(K1, [x], 0.1, n_mc=10**6, seed=1, return_se=True)
        assert abs(value - expected) < 3 * se

    def test_quadrature_matches_closed_form(self):
        f = GmmScore(K1).score
        for x in (0.3, 0.5, 0.66):
            assert ere_quadrature(f, [x], 0.1) == pytest.approx(ere_single_gaussian([0.5], 0.1, [x], 0.1), rel=1e-10)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            exact_ere(K1, [0.5], 0.0)

    def test_data_average_at_most_d(self):
        rng = np.random.default_rng(4)
        xs = FIG1_SPEC.sample(400, rng)
        vals = [exact_ere(FIG1_SPEC, x, 0.1, n_mc=2000, seed=i, return_se=True) for i, x in enumerate(xs)]
        means = np.array([v for v, _ in vals])
        se = means.std(ddof=1) / np.sqrt(len(means))
        assert means.mean() <= FIG1_SPEC.dim + 3 * se


class TestGridArgmax:
    def test_unimodal(self):
        x = grid_argmax(K1, 0.0, [[0.0, 1.0]], 101)
        assert x[0] == pytest.approx(0.5, abs=1e-12)

    def test_fig1_two_modes(self):
        maxima = grid_local_maxima(FIG1_SPEC, 0.0, 0.0, 1.0, 2001)
        np.testing.assert_allclose(maxima, [0.25, 0.75], atol=2e-3)

    def test_symmetric_argmax_set(self):
        maxima = grid_local_maxima(FIG1_SPEC, 0.05, 0.0, 1.0, 2001)
        np.testing.assert_allclose(maxima, 1.0 - maxima[::-1], atol=1e-12)

    def test_high_dim_rejected(self):
        spec = GmmSpec([1.0], [[0.5, 0.5, 0.5]], [0.1])
        with pytest.raises(ValueError):
            grid_argmax(spec, 0.0, [[0, 1]] * 3, 5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(0.01, 1.0), st.floats(-2, 2), st.floats(-2, 2))
def test_single_gaussian_score_formula(std, sigma, mu, y):
    spec = GmmSpec([1.0], [[mu]], [std])
    assert exact_score(spec, [y], sigma)[0] == pytest.approx(-(y - mu) / (std**2 + sigma**2), rel=1e-9, abs=1e-12)
