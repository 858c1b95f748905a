import math

import numpy as np
import pytest
import scipy.stats as st
from hypothesis import given, settings, strategies as hs

from bowlrp.stats import (QuadratTable, benjamini_hochberg, binned_spearman, chi2_from_table,
                          chi2_sf_1df, effective_sample_size, format_value, hoeffding_pvalue, kaplan_meier,
                          logrank_test, monte_carlo_fdr, permute_labels, quadrat_presence, quadrat_table,
                          quadrat_test, spearman_permutation, table_from_presence, write_csv)
from bowlrp.stats import TestResult as Result


def test_hoeffding_example():
    r = hoeffding_pvalue(0.75, 64, 0.5)
    assert r.n_eff == 64
    assert r.p == pytest.approx(math.exp(-8), rel=1e-12)
    assert r.log10_p == pytest.approx(-8 / math.log(10))
    assert effective_sample_size(100, 0.1) == pytest.approx(36.0)
    assert hoeffding_pvalue(0.4, 50, 0.3).p == 1.0


@given(hs.floats(0.5, 1.0), hs.floats(0.5, 1.0), hs.integers(1, 500), hs.floats(0.05, 0.95))
@settings(max_examples=100, deadline=None)
def test_hoeffding_monotone(b1, b2, n, q):
    lo, hi = sorted((b1, b2))
    assert hoeffding_pvalue(hi, n, q).p <= hoeffding_pvalue(lo, n, q).p
    assert hoeffding_pvalue(hi, n + 1, q).p <= hoeffding_pvalue(hi, n, q).p


def test_bh_rules_differ():
    r = benjamini_hochberg([0.01, 0.03, 0.035, 0.2])
    # sorted bounds 0.0125, 0.025, 0.0375, 0.05: rank 2 fails, rank 3 passes
    assert r.significant.tolist() == [True, True, True, False]
    assert r.first_violation.tolist() == [True, False, False, False]
    assert r.thresholds.tolist() == pytest.approx([0.0125, 0.025, 0.0375, 0.05])


def test_bh_simple():
    r = benjamini_hochberg([0.04, 0.01, 0.02])
    assert r.thresholds.tolist() == pytest.approx([0.05, 0.05 / 3, 0.1 / 3])
    assert r.n_step_up == r.n_first_violation == 3


def bh_oracle(p, alpha):
    K = len(p)
    ps = sorted(p)
    k_max = max([k for k in range(1, K + 1) if ps[k - 1] <= alpha * k / K], default=0)
    cut = ps[k_max - 1] if k_max else -1.0
    return [x <= cut for x in p]


@given(hs.lists(hs.floats(0, 1), min_size=1, max_size=30, unique=True), hs.floats(0.01, 0.5))
@settings(max_examples=150, deadline=None)
def test_bh_properties(p, alpha):
    r = benjamini_hochberg(p, alpha)
    assert r.significant.tolist() == bh_oracle(p, alpha)
    assert r.n_first_violation <= r.n_step_up
    assert not (r.first_violation & ~r.step_up).any()
    assert benjamini_hochberg(p, min(0.99, alpha * 1.5)).n_step_up >= r.n_step_up


def test_monte_carlo_fdr():
    assert monte_carlo_fdr([0.9, 0.8, 0.6, 0.55], [0.5, 0.62, 0.4, 0.3], 0.6) == pytest.approx(1 / 3)
    assert monte_carlo_fdr([0.7], [0.8, 0.9], 0.6) == 1.0
    with pytest.raises(ValueError):
        monte_carlo_fdr([0.5], [0.5], 0.9)


def test_permute_labels_seeded():
    v = np.arange(20)
    assert np.array_equal(permute_labels(v, 3), permute_labels(v, 3))
    assert sorted(permute_labels(v, 3).tolist()) == v.tolist()


@pytest.mark.parametrize("x", [0.0, 0.5, 3.84, 20.0, 300.0, 2134.9])
def test_chi2_sf_against_scipy(x):
    p, lp = chi2_sf_1df(x)
    assert p == pytest.approx(st.chi2.sf(x, 1), rel=1e-10, abs=1e-300)
    if 0 < x < 100:
        assert lp == pytest.approx(st.chi2.logsf(x, 1) / math.log(10), rel=1e-9)
    elif x >= 100:
        # scipy underflows here; Mills-ratio series for 2 * Phi(-s)
        z = math.sqrt(x)
        ln = math.log(2) - x / 2 - math.log(z * math.sqrt(2 * math.pi)) + math.log(1 - 1 / x + 3 / x ** 2 - 15 / x ** 3)
        assert lp == pytest.approx(ln / math.log(10), rel=1e-9)


def test_quadrat_chi2_against_contingency():
    t = QuadratTable(1428, 8, 452, 1712)
    r = chi2_from_table(t)
    ref = st.chi2_contingency(np.array([[1428, 8], [452, 1712]]), correction=False)
    assert r.statistic == pytest.approx(ref[0], rel=1e-12)
    assert r.extra["r_cl"] == pytest.approx(1428 * 1712 / (8 * 452))
    assert r.extra["quadrats"] == 3600
    with pytest.raises(ValueError):
        chi2_from_table(QuadratTable(3, 2, 0, 0))


def test_quadrat_presence_rules():
    f = np.zeros((4, 6))
    f[0, 0] = 1.0
    f[2:, 4:] = 0.3
    assert quadrat_presence(f, 2).tolist() == [[True, False, False], [False, False, True]]
    assert quadrat_presence(f, 2, 0.2, rule="mean").tolist() == [[True, False, False], [False, False, True]]
    assert quadrat_presence(f, 2, 0.26, rule="mean").tolist() == [[False] * 3, [False, False, True]]
    with pytest.raises(ValueError):
        quadrat_presence(f, 5)


def test_quadrat_table_counts():
    a = np.zeros((20, 20), dtype=bool)
    b = np.zeros((20, 20), dtype=bool)
    a[:10, :10] = True
    b[:10, :] = True
    b[15, 15] = True
    t = quadrat_table(a, b, 10)
    assert (t.both, t.only_morph, t.only_molec, t.neither) == (1, 0, 2, 1)
    t2, r = quadrat_test(a, b)
    assert t2.side == 2 and t2.total == 100
    assert table_from_presence(a[:2, :2], b[:2, :2]).total == 4


def test_table_pooling():
    s = QuadratTable(1, 2, 3, 4, 10) + QuadratTable(5, 6, 7, 8, 10)
    assert (s.both, s.only_morph, s.only_molec, s.neither, s.side) == (6, 8, 10, 12, 10)
    with pytest.raises(ValueError):
        QuadratTable(1, 1, 1, 1, 10) + QuadratTable(1, 1, 1, 1, 5)


def test_kaplan_meier_example():
    km = kaplan_meier([1, 2, 2, 3, 4], [1, 1, 0, 1, 0])
    assert km.survival.tolist() == pytest.approx([0.8, 0.6, 0.3])
    assert km(0.5) == 1.0 and km(2.5) == pytest.approx(0.6) and km(10) == pytest.approx(0.3)
    assert km.censor_times.tolist() == [2.0, 4.0]


def test_logrank_hand_example():
    # A: deaths at 1 and 3; B: deaths at 2 and 4 -> O_A = 2, E_A = 4/3, V = 13/18
    r = logrank_test([1, 3, 2, 4], [1, 1, 1, 1], ["A", "A", "B", "B"])
    assert r.statistic == pytest.approx(8 / 13)
    assert r.observed == (2, 2) and r.expected[0] == pytest.approx(4 / 3)
    assert r.p == pytest.approx(st.chi2.sf(8 / 13, 1))
    with pytest.raises(ValueError):
        logrank_test([1, 2], [1, 1], ["A", "A"])


def test_logrank_separated_groups():
    rng = np.random.default_rng(0)
    t = np.concatenate([rng.exponential(10, 60), rng.exponential(40, 60)])
    r = logrank_test(t, np.ones(120, bool), np.repeat([0, 1], 60))
    assert r.p < 1e-4 and r.curves[0](20) < r.curves[1](20)


def test_spearman_against_scipy():
    rng = np.random.default_rng(1)
    s = rng.normal(size=80)
    ind = (s + rng.normal(size=80) > 0).astype(float)
    r = spearman_permutation(ind, s, n_perm=200, bins=8)
    assert r.r == pytest.approx(st.spearmanr(ind, s).statistic, rel=1e-12)
    assert r.p == pytest.approx(1 / 201)
    assert -1 <= r.r_binned <= 1
    order = np.argsort(s)
    parts = np.array_split(order, 8)
    means = [ind[p].mean() for p in parts], [s[p].mean() for p in parts]
    assert binned_spearman(ind, s, 8) == pytest.approx(st.spearmanr(*means).statistic)
    with pytest.raises(ValueError):
        binned_spearman(ind, s, 1)


def test_spearman_null_large_p():
    rng = np.random.default_rng(2)
    r = spearman_permutation(rng.integers(0, 2, 60), rng.normal(size=60), n_perm=300, seed=1)
    assert 0 < r.p <= 1 and r.p > 0.01


def test_test_result_validates():
    with pytest.raises(ValueError):
        Result(1.0, 1.5)


def test_csv_formatting(tmp_path):
    assert format_value(0.1) == "0.1" and format_value(np.float64(1 / 3)) == repr(1 / 3)
    assert format_value(np.int64(4)) == "4" and format_value(True) == "True" and format_value(math.nan) == "nan"
    write_csv(tmp_path / "a.csv", [{"x": 1, "y": 0.5}, {"x": 2}])
    assert (tmp_path / "a.csv").read_text() == "x,y\n1,0.5\n2,\n"
