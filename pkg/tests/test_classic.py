import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datw import classic
from oracles import all_warping_paths, brute_force_dtw, brute_force_soft_dtw


class TestDTWExamples:
    def test_small_euclidean_case(self):
        dist, path = classic.dtw([0, 1, 2], [0, 2], metric="euclid")
        assert dist == 1.0
        assert path.steps == ((0, 0), (1, 0), (2, 1))

    def test_identical_series_give_zero_and_diagonal(self):
        x = np.array([1.0, 3.0, 2.0, 5.0])
        dist, path = classic.dtw(x, x)
        assert dist == 0.0
        assert path.steps == tuple((i, i) for i in range(4))

    def test_path_matrix_marks_each_step(self):
        _, path = classic.dtw([0, 1, 2], [0, 2])
        np.testing.assert_array_equal(path.matrix(), [[1, 0], [1, 0], [0, 1]])

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError, match="dimension"):
            classic.dtw(np.zeros((3, 2)), np.zeros((3, 1)))

    def test_unknown_metric_raises(self):
        with pytest.raises(ValueError, match="metric"):
            classic.dtw([0, 1], [0, 1], metric="cosine")

    def test_distance_helper_agrees_with_dtw(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal(7), rng.standard_normal(5)
        assert classic.dtw_distance(a, b) == classic.dtw(a, b)[0]


class TestBand:
    def test_zero_window_equal_lengths_is_euclidean(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        np.testing.assert_allclose(classic.dtw_distance(a, b, window=0), np.sum((a - b) ** 2))

    def test_band_never_lowers_distance(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(9), rng.standard_normal(9)
        assert classic.dtw_distance(a, b, window=1) >= classic.dtw_distance(a, b)

    def test_band_mask_scales_with_unequal_lengths(self):
        mask = classic.band_mask(3, 5, 0)
        np.testing.assert_array_equal(mask, [[1, 0, 0, 0, 0], [0, 0, 1, 0, 0], [0, 0, 0, 0, 1]])

    def test_infeasible_band_raises(self):
        # 3 -> 5 with zero width forces jumps of two columns
        with pytest.raises(ValueError, match="no warping path"):
            classic.dtw(np.zeros(3), np.zeros(5), window=0)

    def test_negative_window_raises(self):
        with pytest.raises(ValueError):
            classic.band_mask(3, 3, -1)


class TestAgainstBruteForce:
    def test_enumerated_paths_count(self):
        # Delannoy numbers D(2,2) = 13, D(3,3) = 63
        assert sum(1 for _ in all_warping_paths(3, 3)) == 13
        assert sum(1 for _ in all_warping_paths(4, 4)) == 63

    def test_random_pairs_match_enumeration(self):
        rng = np.random.default_rng(10)
        for _ in range(40):
            n, m = rng.integers(1, 7, size=2)
            a, b = rng.standard_normal((n, 2)), rng.standard_normal((m, 2))
            assert classic.dtw_distance(a, b) == pytest.approx(brute_force_dtw(a, b), abs=1e-12)

    def test_banded_pairs_match_enumeration(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            n = int(rng.integers(2, 7))
            a, b = rng.standard_normal(n), rng.standard_normal(n)
            w = int(rng.integers(0, 3))
            assert classic.dtw_distance(a, b, window=w) == pytest.approx(
                brute_force_dtw(a, b, window=w), abs=1e-12)

    def test_soft_dtw_matches_path_sum(self):
        rng = np.random.default_rng(12)
        for gamma in (0.1, 1.0, 10.0):
            a, b = rng.standard_normal(4), rng.standard_normal(5)
            assert classic.soft_dtw(a, b, gamma) == pytest.approx(
                brute_force_soft_dtw(a, b, gamma), rel=1e-10)


class TestSoftDTW:
    def test_gamma_must_be_positive(self):
        with pytest.raises(ValueError):
            classic.soft_dtw([0, 1], [0, 1], gamma=0.0)

    def test_small_gamma_approaches_dtw(self):
        a, b = np.array([0.0, 2.0, 1.0, 3.0]), np.array([1.0, 2.0, 3.0])
        assert abs(classic.soft_dtw(a, b, 1e-3) - classic.dtw_distance(a, b)) <= 1e-2

    def test_never_above_dtw(self):
        rng = np.random.default_rng(5)
        for gamma in (0.1, 1.0, 10.0):
            a, b = rng.standard_normal(6), rng.standard_normal(8)
            assert classic.soft_dtw(a, b, gamma) <= classic.dtw_distance(a, b)

    def test_large_costs_do_not_overflow(self):
        a, b = np.array([0.0, 1e3]), np.array([1e3, 0.0, 5e2])
        assert np.isfinite(classic.soft_dtw(a, b, gamma=0.01))


series = st.integers(1, 6).flatmap(
    lambda n: st.lists(st.floats(-5, 5, allow_nan=False), min_size=n, max_size=n))


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(series, series)
    def test_symmetry(self, a, b):
        assert classic.dtw_distance(a, b) == pytest.approx(classic.dtw_distance(b, a), abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(series, series)
    def test_path_is_monotone_continuous_and_anchored(self, a, b):
        _, path = classic.dtw(a, b)
        steps = path.steps
        assert steps[0] == (0, 0) and steps[-1] == (len(a) - 1, len(b) - 1)
        for (i0, j0), (i1, j1) in zip(steps, steps[1:]):
            assert (i1 - i0, j1 - j0) in {(1, 1), (1, 0), (0, 1)}

    @settings(max_examples=60, deadline=None)
    @given(series, series)
    def test_path_cost_equals_distance(self, a, b):
        dist, path = classic.dtw(a, b)
        cost = classic.local_cost_matrix(a, b)
        assert sum(cost[i, j] for i, j in path.steps) == pytest.approx(dist, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(series, series, st.floats(0.01, 10))
    def test_soft_dtw_lower_bound(self, a, b, gamma):
        assert classic.soft_dtw(a, b, gamma) <= classic.dtw_distance(a, b) + 1e-9

    @settings(max_examples=40, deadline=None)
    @given(series)
    def test_self_distance_zero(self, a):
        assert classic.dtw_distance(a, a) == 0.0
