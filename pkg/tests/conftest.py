import numpy as np
import pytest

from gpscan.gp import Hyperparams, PosteriorGaussian


def random_spd(rng, m, cond=50.0):
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), m))
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


def random_posterior(rng, m, diagonal=False):
    mu = rng.standard_normal(m)
    if diagonal:
        sigma = np.diag(rng.uniform(0.3, 3.0, m))
    else:
        sigma = random_spd(rng, m)
    return PosteriorGaussian.from_covariance(mu, sigma)


def identity_posterior(m=2):
    return PosteriorGaussian.from_covariance(np.zeros(m), np.eye(m))


def random_hp(rng, dim):
    return Hyperparams(rng.uniform(0.5, 2.0, dim), rng.uniform(0.5, 2.0),
                       rng.uniform(0.05, 0.5), rng.standard_normal(dim), rng.standard_normal())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
