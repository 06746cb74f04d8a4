from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from classroomsep.stats import StatTestResult, fdr_adjust, mann_whitney_u


def enumerate_two_sided_p(x, y):
    """Independent oracle: exhaustive label assignment over the pooled values."""
    pooled = list(x) + list(y)
    n1 = len(x)
    mu = n1 * len(y) / 2

    def u_of(idx):
        ranks = sps.rankdata(pooled)
        return sum(ranks[i] for i in idx) - n1 * (n1 + 1) / 2

    observed = abs(u_of(range(n1)) - mu)
    hits = total = 0
    for combo in combinations(range(len(pooled)), n1):
        total += 1
        if abs(u_of(combo) - mu) >= observed - 1e-12:
            hits += 1
    return hits / total


class TestMannWhitney:
    def test_separated_samples(self):
        res = mann_whitney_u([1, 2, 3], [4, 5, 6])
        assert res.u == 0
        assert res.p_value == pytest.approx(0.1)
        assert res.rank_biserial == pytest.approx(1.0)

    def test_identical_multisets(self):
        res = mann_whitney_u([1, 2, 3, 4], [1, 2, 3, 4])
        assert res.u == pytest.approx(8.0)  # n^2 / 2
        assert res.rank_biserial == pytest.approx(0.0)
        assert res.p_value == pytest.approx(1.0)

    def test_antisymmetry(self):
        x, y = [1.0, 3.0, 5.0], [2.0, 4.0, 9.0]
        a = mann_whitney_u(x, y)
        b = mann_whitney_u(y, x)
        assert a.u + b.u == pytest.approx(9.0)
        assert a.rank_biserial == pytest.approx(-b.rank_biserial)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mann_whitney_u([], [1.0])

    @settings(max_examples=60, deadline=None)
    @given(
        x=st.lists(st.integers(0, 6), min_size=1, max_size=5),
        y=st.lists(st.integers(0, 6), min_size=1, max_size=5),
    )
    def test_exact_matches_enumeration(self, x, y):
        res = mann_whitney_u(x, y)
        assert res.p_value == pytest.approx(enumerate_two_sided_p(x, y), abs=1e-12)

    def test_large_sample_matches_scipy(self):
        rng = np.random.default_rng(5)
        x = rng.normal(0.0, 1.0, 60)
        y = rng.normal(0.4, 1.0, 70)
        res = mann_whitney_u(x, y)
        ref = sps.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic")
        # scipy reports U for x as "greater" count as well
        assert res.u == pytest.approx(float(ref.statistic))
        assert res.p_value == pytest.approx(float(ref.pvalue), rel=1e-6)

    def test_result_invariants(self):
        with pytest.raises(ValueError):
            StatTestResult(u=10.0, p_value=0.5, rank_biserial=0.0, n1=2, n2=2)


class TestFdr:
    def test_worked_example(self):
        assert fdr_adjust([0.01, 0.02, 0.04]) == pytest.approx([0.03, 0.03, 0.04])

    def test_single_p_unchanged(self):
        assert fdr_adjust([0.37]) == pytest.approx([0.37])

    def test_all_equal_unchanged(self):
        assert fdr_adjust([0.2, 0.2, 0.2]) == pytest.approx([0.2, 0.2, 0.2])

    def test_capped_at_one(self):
        assert max(fdr_adjust([0.9, 0.95, 1.0])) <= 1.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            fdr_adjust([0.5, 1.5])

    @settings(max_examples=40, deadline=None)
    @given(ps=st.lists(st.floats(0, 1), min_size=1, max_size=12))
    def test_reorder_invariance(self, ps):
        base = fdr_adjust(ps)
        rev = fdr_adjust(ps[::-1])
        assert base == pytest.approx(rev[::-1])

    @settings(max_examples=40, deadline=None)
    @given(ps=st.lists(st.floats(0, 1), min_size=1, max_size=12))
    def test_monotone_in_sorted_order(self, ps):
        adj = np.array(fdr_adjust(sorted(ps)))
        assert np.all(np.diff(adj) >= -1e-12)
