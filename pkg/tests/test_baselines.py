"""Tests for the comparison estimators."""
import math

import numpy as np
import pytest

from conftest import build_index, random_instance
from services.baselines import BaselineService
from services.exceptions import BudgetExceededError, ValidationError


class TestLruEstimates:
    def test_che_sums_to_capacity(self, zipf_rates):
        estimate = BaselineService.lru_ttl_estimate(zipf_rates, 10, tol=1e-12)
        assert estimate.item_hit.sum() == pytest.approx(10, abs=1e-8)
        assert estimate.hit_rate == pytest.approx(float(zipf_rates @ estimate.item_hit))

    def test_uniform_rates(self):
        estimate = BaselineService.lru_ttl_estimate(np.full(4, 0.25), 2, tol=1e-13)
        assert estimate.hit_rate == pytest.approx(0.5, abs=1e-10)
        assert estimate.t_c == pytest.approx(4 * math.log(2), rel=1e-9)

    def test_aggregate_on_isolated_catalog_is_lru(self, isolated_index, zipf_rates):
        agg = BaselineService.lru_agg_estimate(isolated_index, zipf_rates, 10, tol=1e-12)
        lru = BaselineService.lru_ttl_estimate(zipf_rates, 10, tol=1e-12)
        assert agg.hit_rate == pytest.approx(lru.hit_rate, abs=1e-10)
        assert agg.rate_ratio == {'min': 1.0, 'median': 1.0, 'max': 1.0}

    def test_aggregate_rates_cover_closed_neighborhood(self, grid3_index):
        lam = np.arange(1, 10, dtype=float)
        agg = BaselineService.aggregate_rates(grid3_index, lam)
        # center sees itself and the four axis neighbors
        assert agg[4] == pytest.approx(lam[[4, 1, 3, 5, 7]].sum())
        assert agg[0] == pytest.approx(lam[[0, 1, 3]].sum())

    def test_capacity_range(self, zipf_rates):
        with pytest.raises(ValidationError):
            BaselineService.lru_ttl_estimate(zipf_rates, 100)


class TestStaticAllocations:
    @pytest.mark.parametrize('seed', range(5))
    def test_greedy_within_one_minus_inverse_e(self, seed):
        index, _, rates = random_instance(seed, n_items=12)
        for capacity in (1, 2, 4):
            greedy = BaselineService.greedy_coverage(index, rates, capacity)
            best = BaselineService.exact_static_optimum(index, rates, capacity)
            assert len(greedy.chosen) <= capacity
            assert best.covered_weight >= greedy.covered_weight - 1e-12
            assert greedy.covered_weight >= (1 - 1 / math.e) * best.covered_weight - 1e-12

    def test_greedy_picks_hub(self):
        index = build_index([[0.0], [1.0], [2.0], [10.0]], 1.0)
        allocation = BaselineService.greedy_coverage(index, np.full(4, 0.25), 1)
        assert allocation.chosen == (1,)
        assert allocation.covered_weight == pytest.approx(0.75)

    def test_full_coverage_caps_at_one(self, grid3_index):
        rates = np.full(9, 1 / 9)
        allocation = BaselineService.exact_static_optimum(grid3_index, rates, 5)
        assert allocation.covered_weight == pytest.approx(1.0)

    def test_optimum_budget(self, zipf_rates, isolated_index):
        with pytest.raises(BudgetExceededError):
            BaselineService.exact_static_optimum(isolated_index, zipf_rates, 5)

    def test_fractional_capacity_floors(self):
        index = build_index([[0.0], [10.0], [20.0]], 1.0)
        allocation = BaselineService.greedy_coverage(index, [0.5, 0.3, 0.2], 1.7)
        assert allocation.chosen == (0,)

    def test_greedy_can_be_strictly_suboptimal(self):
        index = build_index([[float(x)] for x in range(6)], 1.0)
        rates = np.array([1, 1, 2, 2, 1, 1]) / 8
        greedy = BaselineService.greedy_coverage(index, rates, 2)
        best = BaselineService.exact_static_optimum(index, rates, 2)
        assert greedy.chosen == (2, 4)
        assert greedy.covered_weight == pytest.approx(7 / 8)
        assert best.chosen == (1, 4)
        assert best.covered_weight == pytest.approx(1.0)
        assert greedy.covered_weight < best.covered_weight
