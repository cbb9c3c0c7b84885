import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpscan.errors import ConfigMismatchError, GPScanError, InputError, NumericalError
from gpscan.experiments import grid_covariates
from gpscan.gp import Dataset, Hyperparams, sample_prior
from gpscan.scanner import ScanConfig, Scanner
from gpscan.search import SearchMethod
from gpscan.significance import (NullDistribution, null_maxima, order_statistic_index,
                                 randomization_threshold, significance_report)

HP = Hyperparams([3.0, 3.0], 1.0, 0.1, [0.0, 0.0], 2.0)
CFG = ScanConfig(k=6)


@pytest.fixture(scope="module")
def data():
    x = grid_covariates(7)
    return Dataset(x, sample_prior(x, HP, 0))


class TestOrderStatistic:
    def test_twenty_replicates(self):
        assert order_statistic_index(0.05, 20) == 19
        null = NullDistribution.from_maxima(np.arange(1.0, 21.0), 0.05, CFG)
        assert null.threshold == 19.0

    def test_formula_at_one_over_r(self):
        # (1 - alpha) R = 1 selects the smallest replicate maximum
        assert order_statistic_index(1 - 1 / 50, 50) == 1

    def test_hundred(self):
        assert order_statistic_index(0.05, 100) == 95

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    def test_monotone_in_alpha(self, seed, a1, a2):
        m = np.random.default_rng(seed).exponential(size=40)
        lo, hi = sorted((a1, a2))
        t_lo = NullDistribution.from_maxima(m, lo, CFG).threshold
        t_hi = NullDistribution.from_maxima(m, hi, CFG).threshold
        assert t_hi <= t_lo

    def test_bad_alpha(self):
        with pytest.raises(InputError):
            NullDistribution.from_maxima(np.ones(20), 1.0, CFG)


class TestPValues:
    def test_extremes(self):
        null = NullDistribution.from_maxima(np.linspace(1, 2, 100), 0.05, CFG)
        assert null.p_value(0.5) >= 100 / 101
        assert null.p_value(5.0) == pytest.approx(1 / 101)

    def test_ties_count_as_exceeding(self):
        null = NullDistribution.from_maxima(np.array([1.0] * 10 + [2.0] * 10), 0.05, CFG)
        assert null.p_value(2.0) == pytest.approx(11 / 21)


class TestRandomization:
    def test_reproducible(self, data):
        a = randomization_threshold(data, HP, CFG, 20, 0.05, seed=3)
        b = randomization_threshold(data, HP, CFG, 20, 0.05, seed=3)
        assert np.array_equal(a.null_max_llrs, b.null_max_llrs)
        c = randomization_threshold(data, HP, CFG, 20, 0.05, seed=4)
        assert not np.array_equal(a.null_max_llrs, c.null_max_llrs)

    def test_order_independent(self, data):
        sc = Scanner(data.x, HP, CFG)
        full = null_maxima(sc, 25, seed=9)
        one = sc.max_llr(sc.sample_null(np.random.default_rng([9, 24, 0])))
        assert full[24] == one

    def test_requires_twenty(self, data):
        with pytest.raises(InputError):
            randomization_threshold(data, HP, CFG, 19)

    def test_retries_failed_replicates(self, data):
        sc = Scanner(data.x, HP, CFG)
        calls = {"n": 0}

        def flaky(y):
            calls["n"] += 1
            if calls["n"] == 2:
                raise NumericalError("boom")
            return float(np.max(y))

        out = null_maxima(sc, 3, seed=1, statistic=flaky)
        assert calls["n"] == 4 and np.all(np.isfinite(out))

        def broken(y):
            raise NumericalError("always")

        with pytest.raises(GPScanError):
            null_maxima(sc, 2, statistic=broken)

    def test_report(self, data):
        sc = Scanner(data.x, HP, CFG)
        obs = sc.scan(data.y)[:5]
        null = randomization_threshold(data, HP, CFG, 20, 0.05, scanner=sc)
        rep = significance_report(obs, null, CFG)
        assert rep.threshold == null.threshold
        assert np.array_equal(rep.significant, np.array([r.llr for r in obs]) > null.threshold)
        assert len(rep.significant_results) == int(rep.significant.sum())

    def test_config_mismatch(self, data):
        null = randomization_threshold(data, HP, CFG, 20)
        other = ScanConfig(k=5, method=SearchMethod("grq", direction="positive"))
        with pytest.raises(ConfigMismatchError):
            significance_report([], null, other)
        with pytest.raises(ConfigMismatchError):
            randomization_threshold(data, HP, other, 20, scanner=Scanner(data.x, HP, CFG))
