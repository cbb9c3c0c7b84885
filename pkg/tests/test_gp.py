import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from conftest import random_hp
from gpscan.errors import InputError, NumericalError
from gpscan.gp import (Dataset, FitConfig, Hyperparams, JITTER_MAX, fit_hyperparameters,
                       kernel_matrix, lml_gradient, log_marginal_likelihood, mean_function,
                       posterior, robust_cholesky, sample_prior)


def naive_posterior(x, y, xs, hp):
    """Dense-inverse conditional Gaussian, observation space."""
    k = kernel_matrix(x, x, hp) + hp.noise_variance * np.eye(len(x))
    ks = kernel_matrix(xs, x, hp)
    inv = np.linalg.inv(k)
    mu = mean_function(xs, hp) + ks @ inv @ (y - mean_function(x, hp))
    cov = kernel_matrix(xs, xs, hp) - ks @ inv @ ks.T + hp.noise_variance * np.eye(len(xs))
    return mu, cov


class TestKernel:
    def test_single_point(self):
        hp = Hyperparams.isotropic(2)
        assert kernel_matrix([[0.3, 0.1]], [[0.3, 0.1]], hp) == pytest.approx(np.array([[1.0]]))

    def test_unit_distance(self):
        hp = Hyperparams.isotropic(1, lengthscale=1.0, signal_variance=1.0)
        k = kernel_matrix([[0.0]], [[1.0]], hp)
        assert k[0, 0] == pytest.approx(math.exp(-0.5))

    def test_far_points(self):
        hp = Hyperparams.isotropic(1)
        assert kernel_matrix([[0.0]], [[100.0]], hp)[0, 0] < 1e-100

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            kernel_matrix(np.zeros((2, 3)), np.zeros((2, 3)), Hyperparams.isotropic(2))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 3))
    def test_psd(self, seed, n, dim):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-3, 3, (n, dim))
        k = kernel_matrix(x, x, random_hp(rng, dim))
        assert np.allclose(k, k.T)
        assert np.linalg.eigvalsh(k).min() >= -1e-8


class TestMean:
    def test_zero(self):
        assert np.all(mean_function(np.ones((3, 2)), Hyperparams.isotropic(2)) == 0)

    def test_affine(self):
        hp = Hyperparams([1.0], 1.0, 0.1, [3.0], 1.0)
        assert mean_function([[1.0], [2.0]], hp) == pytest.approx([4.0, 7.0])

    def test_bias_only(self):
        hp = Hyperparams.isotropic(2, mean_bias=2.5)
        x = np.random.default_rng(0).standard_normal((5, 2))
        assert mean_function(x, hp) == pytest.approx(np.full(5, 2.5))


class TestHyperparams:
    def test_rejects_bad_values(self):
        with pytest.raises(InputError):
            Hyperparams([1.0], -1.0, 0.1, [0.0])
        with pytest.raises(InputError):
            Hyperparams([0.0], 1.0, 0.1, [0.0])
        with pytest.raises(InputError):
            Hyperparams([1.0], 1.0, 0.0, [0.0])

    def test_dict_round_trip(self, rng):
        hp = random_hp(rng, 3)
        back = Hyperparams.from_dict(hp.to_dict())
        assert np.array_equal(back._pack(), hp._pack())


class TestMarginalLikelihood:
    def test_standard_normal_mode(self):
        hp = Hyperparams([1.0], 0.9, 0.1, [0.0], 0.5)
        data = Dataset([[0.0]], [0.5])
        assert log_marginal_likelihood(data, hp) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_matches_dense_density(self, rng):
        for _ in range(20):
            n, dim = rng.integers(2, 30), rng.integers(1, 4)
            x = rng.uniform(-2, 2, (n, dim))
            hp = random_hp(rng, dim)
            y = rng.standard_normal(n)
            cov = kernel_matrix(x, x, hp) + hp.noise_variance * np.eye(n)
            ref = multivariate_normal(mean_function(x, hp), cov).logpdf(y)
            assert log_marginal_likelihood(Dataset(x, y), hp) == pytest.approx(ref, rel=1e-8, abs=1e-8)

    def test_residual_scaling_decreases(self, rng):
        x = rng.uniform(0, 5, (10, 1))
        hp = Hyperparams([1.0], 1.0, 0.1, [0.0], 0.0)
        r = rng.standard_normal(10)
        vals = [log_marginal_likelihood(Dataset(x, s * r), hp) for s in (1.0, 1.5, 2.0)]
        assert vals[0] > vals[1] > vals[2]

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(5):
            n, dim = 25, rng.integers(1, 4)
            x = rng.uniform(-2, 2, (n, dim))
            hp = random_hp(rng, dim)
            data = Dataset(x, rng.standard_normal(n))
            g = lml_gradient(data, hp)
            theta = hp._pack()
            h = 1e-5
            for j in range(theta.size):
                up, dn = theta.copy(), theta.copy()
                up[j] += h
                dn[j] -= h
                fd = (log_marginal_likelihood(data, Hyperparams._unpack(up, dim))
                      - log_marginal_likelihood(data, Hyperparams._unpack(dn, dim))) / (2 * h)
                assert g[j] == pytest.approx(fd, rel=1e-4, abs=1e-6)


class TestFit:
    def test_recovers_lengthscale(self):
        g = np.arange(20.0)
        x = np.column_stack([a.ravel() for a in np.meshgrid(g, g, indexing="ij")])
        truth = Hyperparams([3.0, 3.0], 1.0, 0.1, [0.0, 0.0], 2.0)
        ok = 0
        for seed in range(20):
            data = Dataset(x, sample_prior(x, truth, seed))
            fit = fit_hyperparameters(data, config=FitConfig(restarts=1, seed=seed))
            ok += np.all((fit.lengthscale > 1.5) & (fit.lengthscale < 6.0))
        assert ok >= 16

    def test_not_worse_than_init(self, rng):
        x = rng.uniform(0, 5, (30, 1))
        truth = Hyperparams([1.0], 1.0, 0.1, [0.0], 0.0)
        data = Dataset(x, sample_prior(x, truth, 1))
        fit = fit_hyperparameters(data, truth, FitConfig(restarts=0))
        again = fit_hyperparameters(data, fit, FitConfig(restarts=2))
        assert log_marginal_likelihood(data, again) >= log_marginal_likelihood(data, fit) - 1e-9

    def test_constant_data_goes_to_noise(self, rng):
        x = rng.uniform(0, 5, (40, 1))
        y = 3.0 + 0.5 * rng.standard_normal(40)
        init = Hyperparams([1.0], 1.0, 1.0, [0.0], 0.0)
        fit = fit_hyperparameters(Dataset(x, y), init)
        assert fit.signal_variance < fit.noise_variance


class TestPosterior:
    def test_matches_dense_inverse(self, rng):
        for _ in range(100):
            n, dim, ns = rng.integers(1, 51), rng.integers(1, 4), rng.integers(1, 6)
            x = rng.uniform(-3, 3, (n, dim))
            xs = rng.uniform(-3, 3, (ns, dim))
            hp = random_hp(rng, dim)
            y = rng.standard_normal(n)
            post = posterior(Dataset(x, y), xs, hp)
            mu, cov = naive_posterior(x, y, xs, hp)
            assert np.linalg.norm(post.mu - mu) <= 1e-8 * max(np.linalg.norm(mu), 1e-300)
            assert np.linalg.norm(post.sigma - cov) <= 1e-8 * np.linalg.norm(cov)

    def test_empty_train_is_prior(self, rng):
        hp = random_hp(rng, 2)
        xs = rng.standard_normal((4, 2))
        post = posterior(None, xs, hp)
        assert post.mu == pytest.approx(mean_function(xs, hp))
        assert post.sigma == pytest.approx(kernel_matrix(xs, xs, hp) + hp.noise_variance * np.eye(4))

    def test_interpolates_without_noise(self, rng):
        x = rng.uniform(0, 10, (8, 1))
        y = np.sin(x[:, 0])
        hp = Hyperparams([1.0], 1.0, 1e-8, [0.0], 0.0)
        post = posterior(Dataset(x, y), x[:3], hp, include_noise=False)
        assert post.mu == pytest.approx(y[:3], abs=1e-4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_variance_never_exceeds_prior(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-3, 3, (20, 2))
        xs = rng.uniform(-3, 3, (5, 2))
        hp = random_hp(rng, 2)
        post = posterior(Dataset(x, rng.standard_normal(20)), xs, hp)
        assert np.all(np.diag(post.sigma) <= hp.signal_variance + hp.noise_variance + 1e-8)


class TestCholesky:
    def test_jitter_repairs_semidefinite(self):
        v = np.ones((3, 1))
        L, jitter = robust_cholesky(v @ v.T)
        assert jitter > 0
        assert np.allclose(L @ L.T, v @ v.T, atol=1e-6)

    def test_gives_up(self):
        a = np.diag([1.0, -1.0])
        with pytest.raises(NumericalError):
            robust_cholesky(a)


class TestSamplePrior:
    def test_degenerate_covariance(self):
        hp = Hyperparams.isotropic(1, signal_variance=1e-12, noise_variance=1e-8, mean_bias=4.0)
        x = np.linspace(0, 1, 5)[:, None]
        assert sample_prior(x, hp, 3) == pytest.approx(np.full(5, 4.0), abs=1e-3)

    def test_same_seed(self, rng):
        x = rng.standard_normal((6, 2))
        hp = random_hp(rng, 2)
        assert np.array_equal(sample_prior(x, hp, 9), sample_prior(x, hp, 9))

    def test_moments(self, rng):
        x = rng.uniform(0, 3, (5, 1))
        hp = Hyperparams([1.0], 1.0, 0.2, [0.5], 1.0)
        draws = sample_prior(x, hp, 0, size=10_000)
        cov = kernel_matrix(x, x, hp) + hp.noise_variance * np.eye(5)
        sd = np.sqrt(np.diag(cov))
        assert np.all(np.abs(draws.mean(axis=0) - mean_function(x, hp)) < 3 * sd / 100)
        emp = np.cov(draws.T)
        se = np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / 10_000)
        assert np.all(np.abs(emp - cov) < 5 * se)


class TestDataset:
    def test_shapes_checked(self):
        with pytest.raises(InputError):
            Dataset(np.zeros((3, 1)), np.zeros(2))
        with pytest.raises(InputError):
            Dataset(np.zeros((2, 1)), [np.nan, 1.0])

    def test_streams(self):
        d = Dataset(np.arange(4.0)[:, None], np.arange(4.0), stream_id=[0, 1, 0, 1])
        parts = d.streams()
        assert sorted(parts) == [0, 1]
        assert parts[1].y.tolist() == [1.0, 3.0]
