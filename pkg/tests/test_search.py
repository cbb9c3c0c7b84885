import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import identity_posterior, random_posterior
from gpscan.errors import InputError, SearchRefusedError
from gpscan.gp import PosteriorGaussian
from gpscan.search import (SearchMethod, beta_max_batch, beta_max_priorities,
                           block_beta_max, block_beta_max_priorities, exhaustive_search,
                           grq_direction, grq_search, iterative_beta_max, prefix_scan,
                           search, stepwise_search)
from gpscan.statistic import llr, llr_max, weighted_residual

Y = np.array([2.0, 4.0])


def brute_force(post, y, sign=0):
    """Best LLR over all nonempty subsets, by explicit enumeration."""
    best = 0.0
    er = weighted_residual(post, y)
    for r in range(1, post.m + 1):
        for c in itertools.combinations(range(post.m), r):
            w = np.zeros(post.m)
            w[list(c)] = 1
            a, b = w @ er, w @ post.precision @ w
            if sign and sign * a <= 0:
                continue
            best = max(best, a * a / (2 * b))
    return best


def correlated_instance(rng, m):
    post = random_posterior(rng, m)
    return post, post.mu + rng.standard_normal(m) + rng.uniform(0, 2) * (rng.random(m) < 0.4)


class TestSearchMethod:
    def test_aliases_and_validation(self):
        assert SearchMethod("BetaMax").variant == "beta-max"
        with pytest.raises(InputError):
            SearchMethod("annealing")
        with pytest.raises(InputError):
            SearchMethod(direction="up")
        with pytest.raises(InputError):
            SearchMethod(max_iters=0)


class TestPriorities:
    def test_identity(self):
        p = beta_max_priorities(np.zeros(2, bool), identity_posterior(), Y)
        assert p == pytest.approx([4.0, 8.0])

    def test_diagonal_orders_by_residual(self, rng):
        var = rng.uniform(0.5, 2, 8)
        post = PosteriorGaussian.from_covariance(np.zeros(8), np.diag(var))
        y = rng.standard_normal(8)
        p = beta_max_priorities(np.zeros(8, bool), post, y)
        assert p == pytest.approx(2 * y)

    def test_flip_sign_test(self, rng):
        # adding point i raises LLR at beta exactly when beta < beta_max_i (beta > 0)
        for _ in range(30):
            post = random_posterior(rng, 6)
            y = post.mu + rng.standard_normal(6) + 1.0
            w = np.array([1, 1, 0, 0, 1, 0], bool)
            p = beta_max_priorities(w, post, y)
            for beta in (0.3, 1.0, 2.5):
                for i in np.flatnonzero(~w):
                    w2 = w.copy()
                    w2[i] = True
                    gain = llr(w2, beta, post, y) - llr(w, beta, post, y)
                    e = post.precision
                    er = weighted_residual(post, y)
                    expected = beta * er[i] - 0.5 * beta ** 2 * (2 * e[i] @ w + e[i, i])
                    assert gain == pytest.approx(expected, abs=1e-9)
                    denom = 2 * (e[i] @ w) + e[i, i]
                    if denom > 0 and abs(beta - p[i]) > 1e-9:
                        assert (gain > 0) == (beta < p[i])


class TestPrefixScan:
    def test_identity_two_prefixes(self):
        s = prefix_scan([1, 0], identity_posterior(), Y)
        assert s.llr == pytest.approx(9.0) and s.w.all()

    def test_single_point(self):
        post = PosteriorGaussian.from_covariance([0.0], [[2.0]])
        s = prefix_scan([0], post, [3.0])
        assert s.llr == pytest.approx(9.0 / 4.0) and s.w.all()

    def test_optimum_first(self, rng):
        post, y = correlated_instance(rng, 8)
        opt = exhaustive_search(post, y)
        order = np.concatenate([np.flatnonzero(opt.w), np.flatnonzero(~opt.w)])
        assert prefix_scan(order, post, y).llr >= opt.llr - 1e-12


class TestIterativeBetaMax:
    def test_ltss_optimal_on_diagonal(self, rng):
        for _ in range(50):
            k = int(rng.integers(1, 16))
            post = random_posterior(rng, k, diagonal=True)
            y = post.mu + rng.standard_normal(k)
            a = iterative_beta_max(post, y)
            b = exhaustive_search(post, y)
            assert a.llr == b.llr
            assert np.array_equal(a.w, b.w)

    def test_zero_residuals(self, rng):
        post = random_posterior(rng, 5)
        s = iterative_beta_max(post, post.mu)
        assert s.llr == 0.0 and s.is_null

    def test_monotone_in_iterations(self, rng):
        for _ in range(20):
            post, y = correlated_instance(rng, 10)
            vals = [iterative_beta_max(post, y, SearchMethod(max_iters=i)).llr for i in (1, 2, 5, 10)]
            assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_both_dominates_each_direction(self, rng):
        for _ in range(20):
            post, y = correlated_instance(rng, 9)
            both = iterative_beta_max(post, y, SearchMethod(direction="both")).llr
            for d in ("positive", "negative"):
                assert both >= iterative_beta_max(post, y, SearchMethod(direction=d)).llr

    def test_negative_direction(self):
        post = identity_posterior()
        s = iterative_beta_max(post, -Y, SearchMethod(direction="negative"))
        assert s.llr == pytest.approx(9.0) and s.beta == pytest.approx(-3.0)
        assert iterative_beta_max(post, -Y, SearchMethod(direction="positive")).is_null


class TestGrq:
    def test_closed_form_ordering(self, rng):
        for _ in range(100):
            post, y = correlated_instance(rng, int(rng.integers(2, 16)))
            wmax = grq_direction(post, y)
            r = y - post.mu
            # closed form B^-1 E r = r / 2; compare orderings after sign resolution
            assert np.array_equal(np.argsort(-wmax, kind="stable"), np.argsort(-r, kind="stable"))
            assert wmax @ r >= 0

    def test_identity(self):
        s = grq_search(identity_posterior(), Y)
        assert s.llr == pytest.approx(9.0)
        assert np.argmax(grq_direction(identity_posterior(), Y)) == 1

    def test_rayleigh_dominance(self, rng):
        post, y = correlated_instance(rng, 7)
        er = weighted_residual(post, y)
        B = 2 * post.precision
        rq = lambda v: (v @ er) ** 2 / (v @ B @ v)
        top = rq(grq_direction(post, y))
        for v in rng.standard_normal((1000, 7)):
            assert rq(v) <= top * (1 + 1e-10)


class TestStepwise:
    def test_identity_trace(self):
        s = stepwise_search(identity_posterior(), Y)
        assert s.llr == pytest.approx(9.0) and s.w.all()

    def test_zero_residuals(self, rng):
        post = random_posterior(rng, 4)
        assert stepwise_search(post, post.mu).is_null

    def test_diagonal_single_peak(self, rng):
        var = np.ones(6)
        post = PosteriorGaussian.from_covariance(np.zeros(6), np.diag(var))
        y = np.array([0.1, 2.0, 3.0, 2.5, -0.2, 0.05])
        assert stepwise_search(post, y).llr == pytest.approx(exhaustive_search(post, y).llr)


class TestExhaustive:
    def test_identity(self):
        s = exhaustive_search(identity_posterior(), Y)
        assert s.w.all() and s.llr == pytest.approx(9.0)

    def test_single_point(self):
        post = PosteriorGaussian.from_covariance([0.0], [[1.0]])
        s = exhaustive_search(post, [1.5])
        assert s.w.tolist() == [True]

    def test_matches_brute_force(self, rng):
        for _ in range(20):
            post, y = correlated_instance(rng, int(rng.integers(1, 9)))
            for d, sign in (("both", 0), ("positive", 1), ("negative", -1)):
                assert exhaustive_search(post, y, d).llr == pytest.approx(brute_force(post, y, sign), rel=1e-10)

    def test_cap(self, rng):
        post = random_posterior(rng, 6)
        with pytest.raises(SearchRefusedError):
            exhaustive_search(post, post.mu + 1, cap=5)

    def test_tie_prefers_smaller_subset(self):
        # the two singletons tie at 0.5; the pair scores zero
        post = PosteriorGaussian.from_covariance(np.zeros(2), np.eye(2))
        s = exhaustive_search(post, [1.0, -1.0], "both")
        assert s.w.tolist() == [True, False]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000), st.integers(1, 10))
    def test_dominates_every_method(self, seed, k):
        rng = np.random.default_rng(seed)
        post, y = correlated_instance(rng, k)
        opt = exhaustive_search(post, y).llr
        for variant in ("beta-max", "grq", "stepwise"):
            s = search(post, y, SearchMethod(variant))
            assert 0 <= s.llr <= opt * (1 + 1e-12) + 1e-15
            if not s.is_null:
                assert s.llr == pytest.approx(llr_max(s.w, post, y).llr, rel=1e-9)


class TestBlockBetaMax:
    def test_singletons_reduce(self, rng):
        post, y = correlated_instance(rng, 6)
        blocks = [[i] for i in range(6)]
        w = np.array([1, 0, 0, 1, 0, 0], bool)
        assert block_beta_max_priorities(blocks, w, post, y) == pytest.approx(
            beta_max_priorities(w, post, y))

    def test_diagonal_pairs(self, rng):
        var = rng.uniform(0.5, 2, 4)
        post = PosteriorGaussian.from_covariance(np.zeros(4), np.diag(var))
        y = rng.standard_normal(4)
        p = block_beta_max_priorities([[0, 1], [2, 3]], np.zeros(4, bool), post, y)
        e = 1 / var
        assert p[0] == pytest.approx(2 * (e[0] * y[0] + e[1] * y[1]) / (e[0] + e[1]))
        assert p[1] == pytest.approx(2 * (e[2] * y[2] + e[3] * y[3]) / (e[2] + e[3]))

    def test_bounded_by_exhaustive(self, rng):
        for _ in range(20):
            post, y = correlated_instance(rng, 8)
            blocks = [[0, 1], [2, 3, 4], [5], [6, 7]]
            s = block_beta_max(blocks, post, y)
            assert s.llr <= exhaustive_search(post, y).llr * (1 + 1e-12)
            # result is a union of whole blocks
            for b in blocks:
                assert len(set(s.w[b].tolist())) == 1

    def test_invalid_blocks(self, rng):
        post, y = correlated_instance(rng, 4)
        with pytest.raises(InputError):
            block_beta_max([[0, 1], [1, 2]], post, y)
        with pytest.raises(InputError):
            block_beta_max([[0], []], post, y)


class TestBatch:
    def test_batch_matches_single(self, rng):
        posts = [correlated_instance(rng, 7) for _ in range(5)]
        E = np.stack([p.precision for p, _ in posts])
        er = np.stack([weighted_residual(p, y) for p, y in posts])
        W, beta, val = beta_max_batch(E, er, sign=1)
        for j, (p, y) in enumerate(posts):
            s = iterative_beta_max(p, y, SearchMethod(direction="positive"))
            assert val[j] == pytest.approx(s.llr) and np.array_equal(W[j], s.w)
