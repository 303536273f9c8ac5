"""
End-to-end checks at experiment scale. Deselected by default; run with `pytest -m slow`.
"""
import dataclasses

import numpy as np
import pytest

from conftest import build_index
from models import ExperimentConfig, Policy
from services import jacobian_analysis as jac
from services.baselines import BaselineService
from services.cache_simulators import rnd_ttl_renewal_oracle
from services.experiment_runner import ExperimentRunner
from services.fixed_point_solver import solve
from services.rnd_ttl_model import occupancy_g

pytestmark = pytest.mark.slow


def test_renewal_oracle_at_a_million_cycles():
    result = rnd_ttl_renewal_oracle(1.0, 2.0, 1.0, 1_000_000, seed=11)
    expected = occupancy_g(2.0, 1.0, 1.0)
    assert abs(result.occupancy - expected) <= 3 * result.standard_error
    assert result.occupancy == pytest.approx(expected, rel=0.01)
    assert abs(result.epoch_occupancy - result.occupancy) <= 3 * result.epoch_standard_error


def test_damping_interval_on_fifty_items():
    rng = np.random.default_rng(50)
    index = build_index(rng.uniform(0.0, 12.0, size=(50, 2)), 2.0)
    q = np.where(index.mask, rng.uniform(0.0, 1.0, index.neighbors.shape), 0.0)
    rates = rng.dirichlet(np.ones(50))
    checked = 0
    for o in jac.sample_capped_simplex(50, 10.0, 20, seed=5):
        bundle = jac.jacobian_g(index, q, rates, 10.0, o, 1e-12)
        matrix = bundle.jacobian_g()
        interval = jac.beta_interval(matrix)
        if interval.discriminant < 0 or interval.is_empty:
            continue
        checked += 1
        eps = 1e-6 * (interval.upper - interval.lower)
        for beta in (interval.lower + eps, interval.midpoint, interval.upper - eps):
            norm = np.linalg.norm((1 - beta) * matrix + beta * np.eye(50), 2)
            assert norm < 1.0
            assert norm ** 2 <= jac.quadratic_bound(interval.gamma, interval.eta, beta) + 1e-9
    assert checked > 0


def test_desk_scale_ordering():
    runner = ExperimentRunner()
    prepared = runner.prepare(ExperimentConfig.from_preset('desk'))
    rows = runner.compare(prepared, ['exp_sim', 'ours_sim', 'lru', 'greedy'])
    for capacity in prepared.config.capacities:
        cell = {r['method']: r for r in rows if r['C'] == capacity}
        assert abs(cell['ours_sim']['hit_rate'] - cell['exp_sim']['hit_rate']) <= 0.05
        assert cell['greedy']['hit_rate'] >= cell['ours_sim']['hit_rate'] >= cell['lru']['hit_rate']
        assert cell['ours_sim']['hit_rate'] <= cell['exp_sim']['hit_rate'] + cell['exp_sim']['ci95']


@pytest.fixture(scope='module')
def grid_d1():
    config = ExperimentConfig.from_preset('synthetic-d1', beta=0.5, max_iterations=25)
    return config, ExperimentRunner().prepare(config)


@pytest.mark.parametrize('capacity', [250.0, 500.0, 1000.0])
def test_grid_scale_iterates_stay_on_capped_simplex(grid_d1, capacity):
    config, prepared = grid_d1
    result = solve(prepared.index, prepared.acceptance, prepared.rates, capacity, config.solver_config())
    assert result.saturated_start > 0
    for record in result.trace.records:
        assert record.occupancy.sum() == pytest.approx(capacity, abs=1e-6)
        assert record.occupancy.min() >= 0.0 and record.occupancy.max() <= 1.0


def test_grid_scale_convergence_at_250(grid_d1):
    config, prepared = grid_d1
    solver_config = dataclasses.replace(config.solver_config(), max_iterations=80)
    result = solve(prepared.index, prepared.acceptance, prepared.rates, 250.0, solver_config)
    assert result.trace.records[-1].step_norm < 1e-4
    assert result.t_c > result.t_c0


@pytest.mark.xfail(strict=False, reason='the LRU start saturates both hot regions and beta = 0.5 '
                                        'is not contractive there; see DESIGN.md')
@pytest.mark.parametrize('capacity', [500.0, 1000.0])
def test_grid_scale_convergence_within_25_iterations(grid_d1, capacity):
    config, prepared = grid_d1
    result = solve(prepared.index, prepared.acceptance, prepared.rates, capacity, config.solver_config())
    assert result.trace.records[-1].step_norm < 1e-4


def test_half_width_over_fifty_traces():
    runner = ExperimentRunner()
    config = ExperimentConfig.from_preset('desk', repetitions=50, trace_length=200_000, capacities=[50.0])
    prepared = runner.prepare(config)
    stats = runner.simulate(prepared, 50.0, Policy.RND_LRU, runner.make_traces(prepared))
    assert stats.repetitions == 50
    assert stats.ci95 < 1.2e-3


def test_coverage_guarantee_on_fifty_instances():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n_items = int(rng.integers(5, 16))
        index = build_index(rng.uniform(0.0, 5.0, size=(n_items, 2)), float(rng.uniform(0.8, 2.0)))
        rates = rng.dirichlet(np.ones(n_items))
        capacity = int(rng.integers(1, min(5, n_items)))
        greedy = BaselineService.greedy_coverage(index, rates, capacity)
        best = BaselineService.exact_static_optimum(index, rates, capacity)
        assert greedy.covered_weight >= (1 - 1 / np.e) * best.covered_weight - 1e-12
        assert greedy.covered_weight <= best.covered_weight + 1e-12
