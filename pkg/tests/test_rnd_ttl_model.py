"""Tests for the closed-form RND-TTL quantities."""
import math

import numpy as np
import pytest
from scipy.optimize import brentq

from conftest import build_index, random_instance
from services import rnd_ttl_model as model
from services.exceptions import BudgetExceededError, ModelError, NoRootError, ValidationError


class TestOccupancyFunction:
    def test_ttl_reduction(self):
        assert model.occupancy_g(1.0, 1.0, math.log(2)) == pytest.approx(0.5, abs=1e-14)

    def test_no_insertions(self):
        assert model.occupancy_g(3.0, 0.0, 2.0) == 0.0

    def test_zero_refresh_limit(self):
        assert model.occupancy_g(0.0, 2.0, 3.0) == pytest.approx(6 / 7, rel=1e-14)

    def test_closed_form_agreement(self):
        x1, x2, x3 = 0.7, 1.3, 2.1
        e = math.expm1(x1 * x3)
        assert model.occupancy_g(x1, x2, x3) == pytest.approx(x2 * e / (x1 + x2 * e), rel=1e-13)

    def test_large_exponent_stays_finite(self):
        value = model.occupancy_g(50.0, 1e-3, 40.0)
        assert 0.0 < value < 1.0 or value == pytest.approx(1.0)
        assert np.isfinite(value)

    def test_monotone_in_each_argument(self):
        grid = np.linspace(0.1, 3.0, 15)
        assert np.all(np.diff(model.occupancy_g(grid, 1.0, 1.0)) >= 0)
        assert np.all(np.diff(model.occupancy_g(1.0, grid, 1.0)) >= 0)
        assert np.all(np.diff(model.occupancy_g(1.0, 1.0, grid)) >= 0)

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValidationError):
            model.occupancy_g(-1.0, 1.0, 1.0)


class TestOccupancyPartials:
    def test_dx2_at_zero_refresh(self):
        _, d2, _ = model.occupancy_g_partials(0.0, 1.0, 1.0)
        assert d2 == pytest.approx(0.25, rel=1e-12)

    def test_dx1_vanishes_without_insertions(self):
        d1, d2, d3 = model.occupancy_g_partials(1.0, 0.0, 1.0)
        assert d1 == 0.0 and d3 == 0.0

    @pytest.mark.parametrize('point', [(1.0, 1.0, 1.0), (1e-4, 2.0, 0.5), (0.3, 0.05, 7.0)])
    def test_match_central_differences(self, point):
        h = 1e-6
        analytic = model.occupancy_g_partials(*point)
        for i in range(3):
            up = list(point)
            down = list(point)
            up[i] += h
            down[i] -= h
            numeric = (model.occupancy_g(*up) - model.occupancy_g(*down)) / (2 * h)
            assert analytic[i] == pytest.approx(numeric, rel=1e-6, abs=1e-10)
            assert analytic[i] >= 0


class TestRates:
    def test_isolated_item(self):
        index = build_index([[0.0], [5.0]], 1.0)
        q = np.zeros(index.neighbors.shape)
        o = np.array([0.3, 0.6])
        assert model.insertion_probs(index, q, o).tolist() == [1.0, 1.0]
        assert model.refresh_rates(index, q, [0.4, 0.6], o).tolist() == pytest.approx([0.4, 0.6])

    def test_single_neighbor_insertion(self):
        index = build_index([[0.0], [1.0]], 1.0)
        q = np.full(index.neighbors.shape, 0.4)
        o = np.array([0.2, 0.7])
        assert model.insertion_probs(index, q, o)[0] == pytest.approx(1 - 0.4 * 0.7)

    def test_all_neighbors_cached(self, grid3_index):
        q = np.where(grid3_index.mask, 1.0, 0.0)
        p = model.insertion_probs(grid3_index, q, np.ones(9))
        assert np.allclose(p, 0.0)

    def test_two_mutual_neighbors_refresh(self):
        index = build_index([[0.0], [1.0]], 1.0)
        q = np.ones(index.neighbors.shape)
        refresh = model.refresh_rates(index, q, [1.0, 1.0], np.array([0.0, 0.5]))
        assert refresh[0] == pytest.approx(1.5)

    def test_cached_neighbor_blocks_refresh(self):
        index = build_index([[0.0], [1.0]], 1.0)
        q = np.ones(index.neighbors.shape)
        refresh = model.refresh_rates(index, q, [1.0, 1.0], np.array([0.0, 1.0]))
        assert refresh[0] == pytest.approx(1.0)

    def test_refresh_matches_direct_sum(self):
        index, q, lam = random_instance(3)
        o = np.random.default_rng(3).uniform(0, 1, index.num_items)
        expected = lam.copy()
        for n in range(index.num_items):
            for k, m in enumerate(index.neighbors_of(n)):
                row_m = index.neighbors_of(m).tolist()
                pos = row_m.index(n)
                product = (1 - o[m]) * np.prod([1 - o[j] for j in row_m[:pos]])
                expected[n] += q[m, pos] * lam[m] * product
        assert model.refresh_rates(index, q, lam, o) == pytest.approx(expected, rel=1e-12)
        assert np.all(model.refresh_rates(index, q, lam, o) >= lam)

    def test_acceptance_out_of_range(self, grid3_index):
        q = np.where(grid3_index.mask, 1.5, 0.0)
        with pytest.raises(ValidationError):
            model.insertion_probs(grid3_index, q, np.zeros(9))


class TestCharacteristicTime:
    def test_isolated_analytic(self):
        lam = np.ones(4)
        assert model.characteristic_time(lam, lam, 2, tol=1e-13) == pytest.approx(math.log(2), abs=1e-10)

    def test_zipf_matches_brentq(self, zipf_rates):
        lam = zipf_rates
        t = model.characteristic_time(lam, lam, 10, tol=1e-12)
        oracle = brentq(lambda s: np.sum(-np.expm1(-lam * s)) - 10, 0.0, 1e6, xtol=1e-14)
        assert t == pytest.approx(oracle, rel=1e-9)

    @pytest.mark.parametrize('start', [1e-3, 1e5])
    def test_bracket_start_does_not_move_the_root(self, zipf_rates, start):
        lam = zipf_rates
        plain = model.characteristic_time(lam, lam, 10, tol=1e-12)
        assert model.characteristic_time(lam, lam, 10, tol=1e-12, start=start) == pytest.approx(plain, rel=1e-9)

    def test_no_root(self):
        with pytest.raises(NoRootError):
            model.characteristic_time(np.ones(4), np.zeros(4), 2)

    def test_residual_bounds(self):
        index = build_index([[0.0], [10.0], [20.0]], 1.0)
        q = np.zeros(index.neighbors.shape)
        lam = np.ones(3) / 3
        o = np.full(3, 0.5)
        assert model.capacity_residual(index, q, lam, o, 0.0, 1.5) == pytest.approx(-1.5)
        t = 2.0
        expected = 3 * (1 - math.exp(-t / 3)) - 1.5
        assert model.capacity_residual(index, q, lam, o, t, 1.5) == pytest.approx(expected)

    def test_solve_zeroes_residual(self, small_grid_index, small_grid_rates):
        q = np.where(small_grid_index.mask, 1.0, 0.0)
        o = np.full(small_grid_index.num_items, 10 / 36)
        t = model.solve_characteristic_time(small_grid_index, q, small_grid_rates, o, 10, tol=1e-12)
        residual = model.capacity_residual(small_grid_index, q, small_grid_rates, o, t, 10)
        assert abs(residual) <= 1e-9


class TestHitProbabilities:
    def test_forms_agree_and_bound_occupancy(self):
        index, q, _ = random_instance(11)
        o = np.random.default_rng(11).uniform(0, 1, index.num_items)
        h = model.item_hit_probs(index, q, o)
        p = model.insertion_probs(index, q, o)
        assert h == pytest.approx(o + (1 - o) * (1 - p), abs=1e-12)
        assert np.all(h >= o) and np.all(h <= 1)

    def test_matching_insertion_probabilities_are_accepted(self):
        index, q, _ = random_instance(12)
        o = np.random.default_rng(12).uniform(0, 1, index.num_items)
        p = model.insertion_probs(index, q, o)
        assert model.item_hit_probs(index, q, o, p) == pytest.approx(model.item_hit_probs(index, q, o))

    def test_inconsistent_insertion_probabilities_raise(self):
        index, q, _ = random_instance(13)
        rng = np.random.default_rng(13)
        o = rng.uniform(0, 1, index.num_items)
        stale = model.insertion_probs(index, q, rng.uniform(0, 1, index.num_items))
        with pytest.raises(ModelError) as excinfo:
            model.item_hit_probs(index, q, o, stale)
        assert excinfo.value.details['tolerance'] == 1e-12

    def test_insertion_probabilities_length(self, isolated_index):
        q = np.zeros(isolated_index.neighbors.shape)
        with pytest.raises(ValidationError):
            model.item_hit_probs(isolated_index, q, np.zeros(100), np.ones(3))

    def test_isolated_hit_equals_occupancy(self, isolated_index):
        o = np.linspace(0, 1, 100)
        q = np.zeros(isolated_index.neighbors.shape)
        assert model.item_hit_probs(isolated_index, q, o) == pytest.approx(o)

    def test_aggregate(self):
        assert model.aggregate_hit_rate([0.2, 0.8], [0.5, 0.25]) == pytest.approx(0.3)


class TestStateDistribution:
    def test_probability_of_a_state(self):
        o = np.array([0.2, 0.5, 0.9])
        assert model.state_probability(o, [0, 2]) == pytest.approx(0.2 * 0.5 * 0.9)

    def test_distribution_sums_to_one_and_matches(self):
        o = np.array([0.1, 0.4, 0.7, 0.3])
        probs = model.state_distribution(o)
        assert probs.sum() == pytest.approx(1.0)
        for mask in range(16):
            members = [n for n in range(4) if mask >> n & 1]
            assert probs[mask] == pytest.approx(model.state_probability(o, members))

    def test_expected_size_is_capacity(self):
        o = np.array([0.25, 0.5, 0.75])
        probs = model.state_distribution(o)
        sizes = np.array([bin(s).count('1') for s in range(8)])
        assert float(probs @ sizes) == pytest.approx(1.5)

    def test_budget(self):
        with pytest.raises(BudgetExceededError):
            model.state_distribution(np.full(21, 0.5))

    def test_states_are_bitmasks(self):
        o = np.array([0.3, 0.6])
        probs = model.state_distribution(o)
        expected = [model.state_probability(o, s) for s in ([], [0], [1], [0, 1])]
        assert probs.tolist() == pytest.approx(expected)
