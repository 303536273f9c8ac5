"""
Service that turns an ExperimentConfig into catalogs, workloads, predictions,
simulations and comparison tables for the CLI and HTTP layers
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from models import (
    AcceptanceProbabilities, BetaTuning, Catalog, CoverCheckResult, CoverStatus, DissimilaritySpec,
    ExperimentConfig, MeasuredStats, ModelInput, NeighborhoodIndex, Policy, PolicyConfig, PopularityModel,
    PredictionReport, SolverResult, TieBreak, Trace,
)
from services import fixed_point_solver, jacobian_analysis, rnd_ttl_model
from services.baselines import BaselineService
from services.cache_simulators import generate_irm_trace, measure_policy
from services.catalog import CatalogService
from services.exceptions import ConfigMismatchError, ValidationError
from utils import data_io
from validators.config import ConfigValidator

logger = logging.getLogger(__name__)

METHODS = ('exp_rnd', 'exp_sim', 'ours_rnd', 'ours_sim', 'lru', 'lru_agg', 'greedy')
COMPARE_COLUMNS = ['method', 'C', 'hit_rate', 'ci95', 'seed_count']
NORM_COLUMNS = ['C', 'beta', 'spectral', 'one', 'infinity']
ITERATION_COLUMNS = ['iteration', 't_c', 'hit_rate', 'step_norm', 'residual']

DEFAULT_SETTINGS = {
    'EXACT_COVER_MAX_ITEMS': 30,
    'EXACT_COVER_MAX_CAPACITY': 10,
    'EXACT_OPTIMUM_MAX_ITEMS': 25,
    'STATE_ENUMERATION_MAX_ITEMS': 20,
    'DEFAULT_WORKERS': 1,
}


@dataclass(frozen=True)
class PreparedExperiment:
    config: ExperimentConfig
    catalog: Catalog
    index: NeighborhoodIndex
    popularity: PopularityModel
    acceptance: AcceptanceProbabilities

    @property
    def rates(self) -> np.ndarray:
        return self.popularity.rates

    def sim_acceptance(self) -> AcceptanceProbabilities:
        return AcceptanceProbabilities(values=np.where(self.index.mask, 1.0, 0.0), rule='sim')

    def model_input(self, capacity: float, acceptance: Optional[AcceptanceProbabilities] = None) -> ModelInput:
        return ModelInput(index=self.index, acceptance=self.acceptance if acceptance is None else acceptance,
                          rates=self.rates, capacity=float(capacity))


class ExperimentRunner:
    """Orchestrates the services for one experiment configuration"""

    def __init__(self, settings: Optional[Mapping[str, Any]] = None):
        self.settings = dict(DEFAULT_SETTINGS)
        if settings:
            self.settings.update({k: settings[k] for k in DEFAULT_SETTINGS if k in settings})

    # ------------------------------------------------------------------
    # Inputs
    # ------------------------------------------------------------------

    @staticmethod
    def build_catalog(config: ExperimentConfig) -> Catalog:
        if config.catalog_file:
            return data_io.read_catalog_csv(config.catalog_file)
        return CatalogService.grid_catalog(config.grid_side)

    @staticmethod
    def tie_break(config: ExperimentConfig) -> TieBreak:
        if config.tie_break == 'auto':
            return TieBreak.COUNTERCLOCKWISE if config.grid_side is not None else TieBreak.BY_ID
        return TieBreak(config.tie_break)

    @staticmethod
    def build_popularity(config: ExperimentConfig, catalog: Catalog) -> PopularityModel:
        if config.popularity_file:
            return data_io.read_popularity_csv(config.popularity_file, len(catalog))
        if config.popularity_trace_file:
            log = data_io.read_trace(config.popularity_trace_file)
            return CatalogService.popularity_from_requests(log.requests, len(catalog))
        return CatalogService.synthetic_popularity(catalog, config.hotspots, config.alpha)

    @staticmethod
    def build_acceptance(config: ExperimentConfig, index: NeighborhoodIndex) -> AcceptanceProbabilities:
        if config.q_rule == 'table':
            return CatalogService.acceptance_from_table(index, data_io.read_q_table(config.q_table_file))
        return CatalogService.acceptance_from_rule(index, config.q_rule, config.q_exponent)

    def prepare(self, config: ExperimentConfig) -> PreparedExperiment:
        ConfigValidator.ensure_valid(config)
        catalog = self.build_catalog(config)
        index = CatalogService.build_neighborhood_index(
            catalog, DissimilaritySpec(threshold=config.threshold), self.tie_break(config)
        )
        popularity = self.build_popularity(config, catalog)
        acceptance = self.build_acceptance(config, index)
        return PreparedExperiment(config=config, catalog=catalog, index=index,
                                  popularity=popularity, acceptance=acceptance)

    @staticmethod
    def trace_seeds(config: ExperimentConfig) -> List[int]:
        return [config.seed + i for i in range(config.repetitions)]

    def make_traces(self, prepared: PreparedExperiment, with_timestamps: bool = False) -> List[Trace]:
        """The configured trace file, or one IRM trace per repetition seed"""
        config = prepared.config
        if config.trace_file:
            trace = data_io.read_trace(config.trace_file)
            if with_timestamps:
                data_io.require_timestamps(trace)
            return [Trace(requests=trace.requests, timestamps=trace.timestamps, seed=config.seed)]
        return [generate_irm_trace(prepared.popularity, config.trace_length, seed, with_timestamps)
                for seed in self.trace_seeds(config)]

    # ------------------------------------------------------------------
    # Prediction
    # ------------------------------------------------------------------

    def cover_check(self, prepared: PreparedExperiment, capacity: float,
                    mode: Optional[str] = None) -> CoverCheckResult:
        if mode is None:
            small = (prepared.index.num_items <= self.settings['EXACT_COVER_MAX_ITEMS']
                     and capacity <= self.settings['EXACT_COVER_MAX_CAPACITY'])
            mode = 'exact' if small else 'heuristic'
        return CatalogService.check_cover_condition(
            prepared.index, capacity, mode,
            max_items=self.settings['EXACT_COVER_MAX_ITEMS'],
            max_capacity=self.settings['EXACT_COVER_MAX_CAPACITY'],
        )

    def tune(self, prepared: PreparedExperiment, capacity: float,
             acceptance: Optional[AcceptanceProbabilities] = None) -> BetaTuning:
        config = prepared.config
        model = prepared.model_input(capacity, acceptance)
        return jacobian_analysis.tune_beta(
            model.index, model.acceptance, model.rates, model.capacity,
            samples=config.beta_samples, seed=config.seed, tc_tol=config.tc_tol,
        )

    def predict(self, prepared: PreparedExperiment, capacity: float,
                acceptance: Optional[AcceptanceProbabilities] = None) -> Tuple[PredictionReport, SolverResult]:
        """Solve the fixed point at one capacity and collect advisory warnings"""
        config = prepared.config
        model = prepared.model_input(capacity, acceptance)
        warnings: List[str] = []

        beta = config.beta
        if config.tune_beta:
            tuning = self.tune(prepared, capacity, model.acceptance)
            beta = tuning.beta
            if not tuning.verified:
                warnings.append(f"beta tuning not verified ({tuning.reason}); using beta={beta}")

        cover = self.cover_check(prepared, capacity)
        if cover.status != CoverStatus.HOLDS:
            message = f"cover condition {cover.status.value} ({cover.mode} check)"
            logger.warning(f"C={capacity}: {message}")
            warnings.append(message)

        result = fixed_point_solver.solve(model.index, model.acceptance, model.rates, model.capacity,
                                          config.solver_config(beta))
        if result.saturated_start:
            warnings.append(f"LRU start saturates {result.saturated_start} items with neighbors")
        if not result.converged:
            message = f"no convergence within {config.max_iterations} iterations"
            logger.warning(f"C={capacity}: {message}")
            warnings.append(message)

        report = PredictionReport(
            hit_rate=result.hits.hit_rate,
            item_hit=result.hits.item_hit.tolist(),
            occupancy=result.occupancy.values.tolist(),
            t_c=result.t_c,
            t_c0=result.t_c0,
            iterations=result.iterations,
            converged=result.converged,
            step_norms=result.trace.step_norms,
            residual=result.residual,
            beta=beta,
            warnings=warnings,
            stop_reason=result.stop_reason.value,
        )
        return report, result

    def state_distribution(self, result: SolverResult) -> Dict[str, float]:
        """Nonzero state probabilities of the final occupancy, keyed by sorted cached ids"""
        probs = rnd_ttl_model.state_distribution(result.occupancy, self.settings['STATE_ENUMERATION_MAX_ITEMS'])
        n_items = result.occupancy.values.shape[0]
        return {
            ','.join(str(n) for n in range(n_items) if mask >> n & 1): float(p)
            for mask, p in enumerate(probs) if p > 0
        }

    @staticmethod
    def iteration_rows(result: SolverResult, capacity: float) -> List[Dict[str, Any]]:
        return [
            {'C': capacity, 'iteration': r.iteration, 't_c': r.t_c, 'hit_rate': r.hit_rate,
             'step_norm': r.step_norm, 'residual': r.residual}
            for r in result.trace.records
        ]

    # ------------------------------------------------------------------
    # Simulation and comparison
    # ------------------------------------------------------------------

    @staticmethod
    def integer_capacity(capacity: float) -> int:
        if capacity != int(capacity) or capacity < 1:
            raise ValidationError('Simulated caches need a positive integer capacity', capacity=capacity)
        return int(capacity)

    def simulate(self, prepared: PreparedExperiment, capacity: float, policy: Policy,
                 traces: Sequence[Trace], timer: Optional[float] = None) -> MeasuredStats:
        config = prepared.config
        policy_config = PolicyConfig(policy=policy, capacity=self.integer_capacity(capacity),
                                     warmup_fraction=config.warmup_fraction, timer=timer)
        return measure_policy(policy_config, prepared.index, prepared.acceptance, traces,
                              seeds=[t.seed if t.seed is not None else config.seed for t in traces],
                              workers=config.workers)

    def resolve_methods(self, prepared: PreparedExperiment, methods: Optional[Sequence[str]]) -> List[str]:
        unknown = sorted(set(methods or ()) - set(METHODS))
        if unknown:
            raise ValidationError(f"Unknown methods: {', '.join(unknown)}", known=list(METHODS))
        table_q = prepared.config.q_rule == 'table'
        if methods is None:
            return [m for m in METHODS if not (table_q and m == 'greedy')]
        if table_q and 'greedy' in methods:
            raise ConfigMismatchError('greedy coverage assumes q = 1 within d and cannot use a q table',
                                      method='greedy', q_rule='table')
        return list(methods)

    def compare(self, prepared: PreparedExperiment, methods: Optional[Sequence[str]] = None,
                traces: Optional[Sequence[Trace]] = None) -> List[Dict[str, Any]]:
        """One row per (C, method) with hit rate and 95% half-width"""
        methods = self.resolve_methods(prepared, methods)
        if traces is None and any(m.startswith('exp_') for m in methods):
            traces = self.make_traces(prepared)
        rows = []
        for capacity in prepared.config.capacities:
            for method in methods:
                rows.append(self._compare_cell(prepared, capacity, method, traces))
        return rows

    def _compare_cell(self, prepared: PreparedExperiment, capacity: float, method: str,
                      traces: Optional[Sequence[Trace]]) -> Dict[str, Any]:
        row = {'method': method, 'C': capacity, 'ci95': 0.0, 'seed_count': 0}
        if method == 'exp_rnd':
            stats = self.simulate(prepared, capacity, Policy.RND_LRU, traces)
        elif method == 'exp_sim':
            stats = self.simulate(prepared, capacity, Policy.SIM_LRU, traces)
        else:
            stats = None
        if stats is not None:
            row.update(hit_rate=stats.mean_hit_rate, ci95=stats.ci95, seed_count=stats.repetitions)
        elif method == 'ours_rnd':
            row['hit_rate'] = self.predict(prepared, capacity)[0].hit_rate
        elif method == 'ours_sim':
            row['hit_rate'] = self.predict(prepared, capacity, prepared.sim_acceptance())[0].hit_rate
        elif method == 'lru':
            row['hit_rate'] = BaselineService.lru_ttl_estimate(prepared.rates, capacity).hit_rate
        elif method == 'lru_agg':
            row['hit_rate'] = BaselineService.lru_agg_estimate(prepared.index, prepared.rates, capacity).hit_rate
        elif method == 'greedy':
            row['hit_rate'] = BaselineService.greedy_coverage(prepared.index, prepared.rates, capacity).covered_weight
        logger.info(f"compare C={capacity} {method}: {row['hit_rate']:.5f}")
        return row

    def occupancy_dump(self, prepared: PreparedExperiment, capacity: float,
                       traces: Optional[Sequence[Trace]] = None) -> List[Dict[str, Any]]:
        """Per-item empirical (RND-LRU) and model occupancy at one capacity"""
        traces = traces if traces is not None else self.make_traces(prepared)
        empirical = self.simulate(prepared, capacity, Policy.RND_LRU, traces).mean_occupancy
        _, result = self.predict(prepared, capacity)
        rows = []
        for n in range(len(prepared.catalog)):
            row = {'id': n}
            row.update({f"x{i}": float(v) for i, v in enumerate(prepared.catalog.embeddings[n])})
            row['empirical_occupancy'] = float(empirical[n])
            row['model_occupancy'] = float(result.occupancy.values[n])
            rows.append(row)
        return rows

    def baselines(self, prepared: PreparedExperiment, capacity: float) -> Dict[str, Any]:
        lru = BaselineService.lru_ttl_estimate(prepared.rates, capacity)
        agg = BaselineService.lru_agg_estimate(prepared.index, prepared.rates, capacity)
        payload = {
            'C': capacity,
            'lru': {'H': lru.hit_rate, 't_C': lru.t_c},
            'lru_agg': {'H': agg.hit_rate, 't_C': agg.t_c, 'rate_ratio': agg.rate_ratio},
        }
        if prepared.config.q_rule != 'table':
            greedy = BaselineService.greedy_coverage(prepared.index, prepared.rates, capacity)
            payload['greedy'] = {'H': greedy.covered_weight, 'chosen': list(greedy.chosen)}
        if prepared.index.num_items <= self.settings['EXACT_OPTIMUM_MAX_ITEMS'] and prepared.config.q_rule != 'table':
            optimum = BaselineService.exact_static_optimum(
                prepared.index, prepared.rates, capacity, self.settings['EXACT_OPTIMUM_MAX_ITEMS'])
            payload['optimum'] = {'H': optimum.covered_weight, 'chosen': list(optimum.chosen)}
        return payload

    # ------------------------------------------------------------------
    # Jacobian diagnostics
    # ------------------------------------------------------------------

    def jacobian_norms(self, prepared: PreparedExperiment, beta: Optional[float] = None) -> List[Dict[str, Any]]:
        """Norms of J_G_beta at the LRU start o(0) for every configured capacity"""
        config = prepared.config
        beta = config.beta if beta is None else beta
        rows = []
        for capacity in config.capacities:
            start, _ = fixed_point_solver.initial_occupancy(prepared.rates, capacity, config.tc_tol)
            bundle = jacobian_analysis.jacobian_g(prepared.index, prepared.acceptance, prepared.rates,
                                                  capacity, start, config.tc_tol)
            norms = jacobian_analysis.operator_norms(jacobian_analysis.jacobian_matrix(bundle, beta),
                                                     seed=config.seed)
            rows.append({'C': capacity, 'beta': beta, 'spectral': norms.spectral,
                         'one': norms.one, 'infinity': norms.infinity})
            logger.info(f"J_G_beta norms at o(0), C={capacity}: spectral={norms.spectral:.4f}")
        return rows
