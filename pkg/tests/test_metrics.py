import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from merbench.metrics import (ConstantInputError, avg_correlation, box_stats, mae, paired_ttest, pearson,
                              quantile)


def loop_mae(p, t):
    return math.fsum(abs(a - b) for a, b in zip(p, t)) / len(p)


def loop_pearson(a, b):
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def loop_quantile(xs, q):
    xs = sorted(xs)
    h = (len(xs) - 1) * q
    j = int(h)
    return xs[j] + (h - j) * (xs[min(j + 1, len(xs) - 1)] - xs[j])


def loop_t(d):
    n = len(d)
    m = math.fsum(d) / n
    s = math.sqrt(math.fsum((x - m) ** 2 for x in d) / (n - 1))
    return m / (s / math.sqrt(n))


def instances(count=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(3, 200))
        yield rng.normal(size=n) * rng.uniform(0.1, 10), rng.normal(size=n) + rng.uniform(-3, 3)


class TestOracles:
    def test_mae(self):
        for p, t in instances():
            assert mae(p, t) == pytest.approx(loop_mae(p, t), rel=1e-12, abs=1e-12)

    def test_pearson(self):
        for a, b in instances(seed=1):
            b = b + 0.5 * a  # give the pair some correlation
            assert pearson(a, b) == pytest.approx(loop_pearson(a, b), rel=1e-12, abs=1e-12)

    def test_quartiles(self):
        for a, _ in instances(seed=2):
            for q in (0.25, 0.5, 0.75):
                assert quantile(a, q) == pytest.approx(loop_quantile(list(a), q), rel=1e-12, abs=1e-12)
                assert quantile(a, q) == pytest.approx(np.percentile(a, 100 * q), rel=1e-12, abs=1e-12)

    def test_paired_ttest(self):
        for a, b in instances(seed=3):
            res = paired_ttest(a - b)
            ref = stats.ttest_rel(a, b)
            assert res.t == pytest.approx(loop_t(list(a - b)), rel=1e-12, abs=1e-12)
            assert res.p == pytest.approx(ref.pvalue, rel=1e-12, abs=1e-12)
            assert res.df == len(a) - 1


def test_mae_examples():
    assert mae([0.0, 1.0], [0.5, 0.5]) == 0.5
    assert mae(np.ones((3, 8)), np.ones((3, 8))) == 0.0
    with pytest.raises(ValueError):
        mae([1, 2], [1])


class TestPearson:
    def test_perfect(self):
        x = np.arange(10.0)
        assert pearson(x, 3 * x + 2) == 1.0
        assert pearson(x, -x) == -1.0

    def test_constant_is_flagged(self):
        with pytest.raises(ConstantInputError):
            pearson(np.ones(5), np.arange(5.0))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-50, 50), st.floats(0.01, 100))
    def test_affine_invariance(self, seed, scale, shift, scale_b):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=30), rng.normal(size=30)
        assert pearson(scale * a + shift, scale_b * b) == pytest.approx(pearson(a, b), abs=1e-9)

    def test_avg_correlation_skips_constant_columns(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=(20, 3))
        pred = y.copy()
        pred[:, 2] = 1.0
        with pytest.warns(RuntimeWarning):
            assert avg_correlation(pred, y) == 1.0


class TestBoxStats:
    def test_quartiles_and_whiskers(self):
        b = box_stats([1, 2, 3, 4, 5, 6, 7, 8, 100])
        assert (b.q1, b.median, b.q3) == (3.0, 5.0, 7.0)
        assert b.whisker_low == 1.0 and b.whisker_high == 8.0
        assert b.outliers == [100.0] and b.n == 9

    def test_single_value(self):
        b = box_stats([0.3])
        assert b.median == b.q1 == b.q3 == b.whisker_low == b.whisker_high == 0.3

    def test_quantile_interpolates(self):
        assert quantile([1, 2, 3, 4], 0.25) == 1.75
        with pytest.raises(ValueError):
            quantile([], 0.5)


class TestTTest:
    def test_df_convention_matches_360_pairs(self):
        d = np.random.default_rng(0).normal(0.1, 1, size=360)
        assert paired_ttest(d).df == 359

    def test_bonferroni_threshold(self):
        d = np.random.default_rng(1).normal(0.3, 1, size=50)
        one, two = paired_ttest(d, 0.05, 1), paired_ttest(d, 0.05, 2)
        assert two.threshold == 0.025 and one.p == two.p
        assert two.significant == (two.p < 0.025)

    def test_known_value(self):
        # mean 1, sd 1, n 4 gives t = 2
        res = paired_ttest([0.0, 1.0, 1.0, 2.0])
        assert res.t == pytest.approx(1 / (math.sqrt(2 / 3) / 2), rel=1e-12)
        assert res.p == pytest.approx(2 * stats.t.sf(res.t, 3), rel=1e-12)

    def test_zero_variance_is_degenerate(self):
        res = paired_ttest([0.2, 0.2, 0.2])
        assert res.degenerate and not res.significant and math.isnan(res.p)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            paired_ttest([1.0])


def test_spec_examples():
    assert mae(np.full(5, 0.6), np.full(5, 0.5)) == pytest.approx(0.1, abs=1e-15)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 5]) == pytest.approx(loop_pearson([1, 2, 3, 4], [1, 3, 2, 5]), abs=1e-12)
    res = paired_ttest([1.0, -1.0])
    assert res.t == 0.0 and res.p == 1.0 and res.df == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(-20, 20).filter(lambda c: abs(c) > 1e-3), st.floats(-100, 100))
def test_pearson_sign_invariance(seed, c, d):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=25), rng.normal(size=25)
    assert pearson(a, c * b + d) == pytest.approx(np.sign(c) * pearson(a, b), abs=1e-12)


def test_avg_correlation_matches_column_oracle():
    rng = np.random.default_rng(9)
    y = rng.normal(size=(40, 8))
    pred = y * np.linspace(0.1, 2, 8) + rng.normal(size=(40, 8))
    expect = np.mean([loop_pearson(list(pred[:, j]), list(y[:, j])) for j in range(8)])
    assert avg_correlation(pred, y) == pytest.approx(expect, abs=1e-12)
    assert avg_correlation(y, y) == pytest.approx(1.0, abs=1e-15)
