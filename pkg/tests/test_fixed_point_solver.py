"""Tests for the damped fixed-point iteration."""
import numpy as np
import pytest
from scipy.optimize import brentq

from conftest import build_index
from models import SolverConfig, StopReason
from services import fixed_point_solver as solver
from services import jacobian_analysis as jac
from services.baselines import BaselineService
from services.exceptions import SolverError, ValidationError


class TestInitialOccupancy:
    def test_lru_start_sums_to_capacity(self, zipf_rates):
        o, t0 = solver.initial_occupancy(zipf_rates, 10, 1e-12)
        assert o.sum() == pytest.approx(10, abs=1e-9)
        assert o == pytest.approx(-np.expm1(-zipf_rates * t0))


class TestMaps:
    def test_isolated_map_is_constant(self, isolated_index, zipf_rates):
        q = np.zeros(isolated_index.neighbors.shape)
        start, t0 = solver.initial_occupancy(zipf_rates, 10, 1e-13)
        image, t_c, params = solver.map_g(isolated_index, q, zipf_rates, 10, np.full(100, 0.1), 1e-13)
        assert image == pytest.approx(start, abs=1e-10)
        assert t_c == pytest.approx(t0, rel=1e-9)
        assert params.insertion_rates == pytest.approx(zipf_rates)

    def test_damped_map(self, small_grid_index, small_grid_rates):
        q = np.where(small_grid_index.mask, 1.0, 0.0)
        o = np.full(36, 8 / 36)
        image, _, _ = solver.map_g(small_grid_index, q, small_grid_rates, 8, o)
        damped = solver.map_g_beta(small_grid_index, q, small_grid_rates, 8, o, 0.25)
        assert damped == pytest.approx(0.75 * image + 0.25 * o)

    def test_image_sums_to_capacity(self, small_grid_index, small_grid_rates):
        q = np.where(small_grid_index.mask, 0.5, 0.0)
        o = jac.sample_capped_simplex(36, 8.0, 1, seed=0)[0]
        assert o.max() <= 1.0
        image, _, _ = solver.map_g(small_grid_index, q, small_grid_rates, 8, o, 1e-12)
        assert image.sum() == pytest.approx(8, abs=1e-9)

    def test_mutual_pair_matches_hand_expansion(self):
        index = build_index([[0.0], [1.0]], 1.0)
        q = np.where(index.mask, 1.0, 0.0)
        rates = np.array([0.5, 0.5])
        o = np.array([0.3, 0.7])
        # with q = 1 a request for n is inserted only when its partner is absent:
        # E_1 = 0.5 (1 - o_2), R_1 = 0.5 + 0.5 (1 - o_2), and symmetrically for item 2
        insertion = np.array([0.5 * 0.3, 0.5 * 0.7])
        refresh = np.array([0.5 + 0.5 * 0.3, 0.5 + 0.5 * 0.7])

        def g(x1, x2, t):
            on = np.expm1(x1 * t)
            return x2 * on / (x1 + x2 * on)

        t_expected = brentq(lambda t: g(refresh, insertion, t).sum() - 1.0, 1e-9, 1e3, xtol=1e-14)
        image, t_c, params = solver.map_g(index, q, rates, 1, o, 1e-13)
        assert params.insertion_rates == pytest.approx(insertion, abs=1e-15)
        assert params.refresh_rates == pytest.approx(refresh, abs=1e-15)
        assert t_c == pytest.approx(t_expected, rel=1e-9)
        assert image == pytest.approx(g(refresh, insertion, t_expected), abs=1e-10)
        assert image.sum() == pytest.approx(1.0, abs=1e-12)

    def test_mutual_pair_symmetric_point_is_fixed(self):
        index = build_index([[0.0], [1.0]], 1.0)
        q = np.where(index.mask, 1.0, 0.0)
        image, t_c, _ = solver.map_g(index, q, np.array([0.5, 0.5]), 1, np.array([0.5, 0.5]), 1e-13)
        # E = 0.25 and R = 0.75 give g = 1/2 exactly when expm1(0.75 T) = 3
        assert t_c == pytest.approx(np.log(4.0) / 0.75, rel=1e-10)
        assert image == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_beta_out_of_range(self, small_grid_index, small_grid_rates):
        q = np.zeros(small_grid_index.neighbors.shape)
        with pytest.raises(ValidationError):
            solver.map_g_beta(small_grid_index, q, small_grid_rates, 8, np.full(36, 8 / 36), 1.0)


class TestSolve:
    def test_isolated_catalog_reduces_to_lru(self, isolated_index, zipf_rates):
        q = np.zeros(isolated_index.neighbors.shape)
        config = SolverConfig(beta=0.5, tc_tol=1e-13, occupancy_tol=1e-12)
        result = solver.solve(isolated_index, q, zipf_rates, 10, config)
        assert result.converged
        assert result.iterations <= 2
        assert result.residual < 1e-12
        expected = -np.expm1(-zipf_rates * result.t_c)
        assert result.hits.item_hit == pytest.approx(expected, abs=1e-10)
        lru = BaselineService.lru_ttl_estimate(zipf_rates, 10, tol=1e-13)
        assert result.hits.hit_rate == pytest.approx(lru.hit_rate, abs=1e-10)

    def test_grid_converges_and_stays_in_simplex(self, small_grid_index, small_grid_rates):
        q = np.where(small_grid_index.mask, 1.0, 0.0)
        result = solver.solve(small_grid_index, q, small_grid_rates, 8, SolverConfig(max_iterations=200))
        assert result.converged
        assert result.stop_reason == StopReason.TOLERANCE
        for record in result.trace.records:
            assert record.occupancy.sum() == pytest.approx(8, abs=1e-6)
        assert result.occupancy.is_member(1e-6)
        assert np.all(result.hits.item_hit >= result.occupancy.values - 1e-12)

    def test_weakly_coupled_grid_converges_within_25_iterations(self, small_grid_index, small_grid_rates):
        q = np.where(small_grid_index.mask, 0.01, 0.0)
        config = SolverConfig(beta=0.5, max_iterations=25, occupancy_tol=1e-6)
        result = solver.solve(small_grid_index, q, small_grid_rates, 8, config)
        assert result.converged
        assert result.iterations <= 25
        assert result.residual < 1e-5
        for record in result.trace.records:
            assert record.occupancy.sum() == pytest.approx(8, abs=1e-6)

    def test_mutual_pair_starts_at_its_fixed_point(self):
        index = build_index([[0.0], [1.0]], 1.0)
        q = np.where(index.mask, 1.0, 0.0)
        config = SolverConfig(beta=0.5, tc_tol=1e-13, occupancy_tol=1e-10)
        result = solver.solve(index, q, np.array([0.5, 0.5]), 1, config)
        assert result.converged
        assert result.iterations == 1
        assert result.occupancy.values == pytest.approx([0.5, 0.5], abs=1e-12)
        assert result.t_c == pytest.approx(np.log(4.0) / 0.75, rel=1e-10)
        assert result.t_c0 == pytest.approx(np.log(4.0), rel=1e-10)
        assert result.saturated_start == 0

    def test_counts_saturated_start_items_with_neighbors(self):
        # item 0 is hot and has item 1 as its only neighbor; the rest are isolated
        points = [[0.0], [1.0]] + [[10.0 * k] for k in range(1, 40)]
        rates = np.array([0.5] + [0.0125] * 40)
        index = build_index(points, 1.0)
        result = solver.solve(index, np.zeros(index.neighbors.shape), rates, 30)
        assert result.saturated_start == 1

    def test_trace_records(self, small_grid_index, small_grid_rates):
        q = np.where(small_grid_index.mask, 1.0, 0.0)
        result = solver.solve(small_grid_index, q, small_grid_rates, 8, SolverConfig(max_iterations=3,
                                                                                    occupancy_tol=0.0))
        assert not result.converged
        assert result.stop_reason == StopReason.MAX_ITERATIONS
        assert [r.iteration for r in result.trace.records] == [0, 1, 2, 3]
        assert np.isnan(result.trace.records[0].step_norm)
        assert result.trace.records[0].t_c == pytest.approx(result.t_c0)
        assert all(np.isfinite(r.residual) for r in result.trace.records)

    def test_beta_zero_is_plain_iteration(self, small_grid_index, small_grid_rates):
        q = np.where(small_grid_index.mask, 0.5, 0.0)
        result = solver.solve(small_grid_index, q, small_grid_rates, 8,
                              SolverConfig(beta=0.0, max_iterations=1, occupancy_tol=0.0))
        start, _ = solver.initial_occupancy(small_grid_rates, 8)
        image, _, _ = solver.map_g(small_grid_index, q, small_grid_rates, 8, start)
        assert result.occupancy.values == pytest.approx(image)

    def test_similarity_raises_hit_rate_above_lru(self, small_grid_index, small_grid_rates):
        q = np.where(small_grid_index.mask, 1.0, 0.0)
        result = solver.solve(small_grid_index, q, small_grid_rates, 8)
        assert result.hits.hit_rate > BaselineService.lru_ttl_estimate(small_grid_rates, 8).hit_rate

    def test_rejects_bad_inputs(self, small_grid_index, small_grid_rates):
        q = np.zeros(small_grid_index.neighbors.shape)
        with pytest.raises(ValidationError):
            solver.solve(small_grid_index, q, small_grid_rates * 2, 8)
        with pytest.raises(ValidationError):
            solver.solve(small_grid_index, q, small_grid_rates, 36)
        with pytest.raises(ValidationError):
            solver.solve(small_grid_index, q, small_grid_rates, 8, SolverConfig(beta=1.0))

    def test_no_root_becomes_solver_error(self):
        index = build_index([[0.0], [10.0], [20.0], [30.0]], 1.0)
        rates = np.array([0.5, 0.5, 0.0, 0.0])
        with pytest.raises(SolverError) as excinfo:
            solver.solve(index, np.zeros(index.neighbors.shape), rates, 2)
        assert excinfo.value.iteration == 0

