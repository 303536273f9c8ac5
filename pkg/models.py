"""
Domain models for simcache-lab
Catalog, model, solver, simulation and experiment types shared by the service layer
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Item:
    """One catalog item: dense integer id plus its embedding."""
    id: int
    embedding: Tuple[float, ...]


@dataclass(frozen=True)
class Catalog:
    """Item universe stored as an (N, D) embedding matrix; row n is item n."""
    embeddings: np.ndarray

    def __len__(self) -> int:
        return int(self.embeddings.shape[0])

    def __iter__(self) -> Iterator[Item]:
        for n in range(len(self)):
            yield self[n]

    def __getitem__(self, n: int) -> Item:
        return Item(id=n, embedding=tuple(float(x) for x in self.embeddings[n]))

    @property
    def dimension(self) -> int:
        return int(self.embeddings.shape[1]) if self.embeddings.ndim == 2 else 0


class Metric(str, Enum):
    EUCLIDEAN = 'euclidean'


class TieBreak(str, Enum):
    BY_ID = 'by_id'
    COUNTERCLOCKWISE = 'counterclockwise'


@dataclass(frozen=True)
class DissimilaritySpec:
    threshold: float
    metric: Metric = Metric.EUCLIDEAN


@dataclass(frozen=True)
class NeighborhoodIndex:
    """
    Open neighborhoods N(n) in padded row form.

    Row n of `neighbors` lists the ids m != n with dis(n, m) <= d in strictly
    increasing (distance, tie-break) order, padded with -1 up to `max_degree`.
    `reverse[n, k]` is the position of n inside the row of neighbors[n, k].
    """
    neighbors: np.ndarray
    distances: np.ndarray
    reverse: np.ndarray
    degrees: np.ndarray
    threshold: float
    tie_break: TieBreak

    @property
    def num_items(self) -> int:
        return int(self.neighbors.shape[0])

    @property
    def max_degree(self) -> int:
        return int(self.neighbors.shape[1])

    @property
    def mask(self) -> np.ndarray:
        return self.neighbors >= 0

    def neighbors_of(self, n: int) -> np.ndarray:
        return self.neighbors[n, :self.degrees[n]]

    def distances_of(self, n: int) -> np.ndarray:
        return self.distances[n, :self.degrees[n]]

    def closed_neighbors_of(self, n: int) -> np.ndarray:
        """N[n] with n ranked first (dis(n, n) = 0)."""
        return np.concatenate(([n], self.neighbors_of(n))).astype(np.int64)

    def closer_than(self, n: int, m: int) -> np.ndarray:
        """N_<m(n): the neighbors of n ranked before m."""
        row = self.neighbors_of(n)
        position = np.flatnonzero(row == m)
        if position.size == 0:
            raise KeyError(f"{m} is not a neighbor of {n}")
        return row[:position[0]]

    def is_isolated(self) -> bool:
        return bool(np.all(self.degrees == 0))


@dataclass(frozen=True)
class PopularityModel:
    weights: np.ndarray
    rates: np.ndarray


@dataclass(frozen=True)
class AcceptanceProbabilities:
    """
    Acceptance probabilities aligned with a NeighborhoodIndex.

    `values[n, k]` is q_m(n) for m = neighbors[n, k]: the probability that m, as the
    closest cached neighbor, is used to serve a request for n. q_n(n) = 1 is implied.
    """
    values: np.ndarray
    rule: str = 'custom'


@dataclass(frozen=True)
class ModelInput:
    index: NeighborhoodIndex
    acceptance: AcceptanceProbabilities
    rates: np.ndarray
    capacity: float


class CoverStatus(str, Enum):
    HOLDS = 'holds'
    FAILS = 'fails'
    UNKNOWN = 'unknown'


@dataclass(frozen=True)
class CoverCheckResult:
    status: CoverStatus
    mode: str
    covered: int
    required: float
    witness: Tuple[int, ...] = ()


# ---------------------------------------------------------------------------
# RND-TTL model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OccupancyVector:
    values: np.ndarray
    capacity: float

    def is_member(self, tol: float = 1e-9) -> bool:
        """Membership in the capped simplex."""
        v = self.values
        return bool(np.all(v >= -tol) and np.all(v <= 1 + tol) and abs(v.sum() - self.capacity) <= tol)


@dataclass(frozen=True)
class RndTtlParams:
    insertion_rates: np.ndarray
    refresh_rates: np.ndarray
    timer: float


@dataclass(frozen=True)
class HitReport:
    item_hit: np.ndarray
    hit_rate: float


# ---------------------------------------------------------------------------
# Fixed point solver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    beta: float = 0.5
    max_iterations: int = 100
    occupancy_tol: float = 1e-8
    tc_tol: float = 1e-10
    keep_vectors: bool = True


class StopReason(str, Enum):
    TOLERANCE = 'tolerance'
    MAX_ITERATIONS = 'max_iterations'


@dataclass
class IterationRecord:
    iteration: int
    t_c: float
    hit_rate: float
    step_norm: float
    residual: float = float('nan')
    occupancy: Optional[np.ndarray] = None
    item_hit: Optional[np.ndarray] = None


@dataclass
class SolverTrace:
    records: List[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def step_norms(self) -> List[float]:
        return [r.step_norm for r in self.records[1:]]

    @property
    def t_c_values(self) -> List[float]:
        return [r.t_c for r in self.records]

    @property
    def hit_rates(self) -> List[float]:
        return [r.hit_rate for r in self.records]


@dataclass(frozen=True)
class SolverResult:
    occupancy: OccupancyVector
    hits: HitReport
    t_c: float
    t_c0: float
    trace: SolverTrace
    converged: bool
    stop_reason: StopReason
    params: RndTtlParams
    saturated_start: int = 0

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1

    @property
    def residual(self) -> float:
        return self.trace.records[-1].residual


@dataclass
class PredictionReport:
    hit_rate: float
    item_hit: List[float]
    occupancy: List[float]
    t_c: float
    t_c0: float
    iterations: int
    converged: bool
    step_norms: List[float]
    residual: float
    beta: float
    warnings: List[str] = field(default_factory=list)
    stop_reason: str = StopReason.MAX_ITERATIONS.value

    def to_dict(self) -> Dict[str, Any]:
        return {
            'H': self.hit_rate,
            'h': self.item_hit,
            'o': self.occupancy,
            't_C': self.t_c,
            't_C0': self.t_c0,
            'iterations': self.iterations,
            'converged': self.converged,
            'stop_reason': self.stop_reason,
            'step_norms': self.step_norms,
            'residual': self.residual,
            'beta': self.beta,
            'warnings': self.warnings,
        }


# ---------------------------------------------------------------------------
# Jacobian analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JacobianBundle:
    """
    Jacobian pieces at one occupancy vector.

    J_G = Diag(dg1) J_R + Diag(dg2) J_E - dg3 w^T / sum(dg3), with
    w^T = dg1^T J_R + dg2^T J_E. J_E and J_R are sparse; J_G is only densified
    on request since it carries a dense rank-one term.
    """
    jac_e: sparse.csr_matrix
    jac_r: sparse.csr_matrix
    dg1: np.ndarray
    dg2: np.ndarray
    dg3: np.ndarray
    t_c: float

    @property
    def size(self) -> int:
        return int(self.dg1.shape[0])

    @property
    def coupling_row(self) -> np.ndarray:
        return np.asarray(self.jac_r.T @ self.dg1 + self.jac_e.T @ self.dg2).ravel()

    def jacobian_g(self) -> np.ndarray:
        local = sparse.diags(self.dg1) @ self.jac_r + sparse.diags(self.dg2) @ self.jac_e
        return local.toarray() - np.outer(self.dg3, self.coupling_row) / self.dg3.sum()

    def jacobian_g_beta(self, beta: float) -> np.ndarray:
        return (1.0 - beta) * self.jacobian_g() + beta * np.eye(self.size)


@dataclass(frozen=True)
class BetaInterval:
    """
    Damping interval from (gamma, eta).

    gamma is rho(J J^T), the squared spectral norm of J_G, so that
    (1 + gamma) b^2 - (2 gamma - eta) b + gamma bounds ||J_G_beta||_2^2.
    """
    gamma: float
    eta: float
    discriminant: float
    lower: float
    upper: float
    spectral_norm: float = float('nan')

    @property
    def is_empty(self) -> bool:
        return not (self.discriminant >= 0 and self.lower < self.upper)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)


@dataclass
class BetaTuning:
    beta: float
    verified: bool
    intervals: List[BetaInterval]
    intersection: Optional[Tuple[float, float]]
    skipped: int = 0
    reason: str = ''


@dataclass(frozen=True)
class OperatorNorms:
    spectral: float
    one: float
    infinity: float


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trace:
    requests: np.ndarray
    timestamps: Optional[np.ndarray] = None
    seed: Optional[int] = None

    def __len__(self) -> int:
        return int(self.requests.shape[0])


class Policy(str, Enum):
    RND_LRU = 'rnd_lru'
    SIM_LRU = 'sim_lru'
    LRU = 'lru'
    TTL = 'ttl'


@dataclass(frozen=True)
class PolicyConfig:
    policy: Policy
    capacity: int
    warmup_fraction: float = 0.1
    timer: Optional[float] = None


@dataclass
class EmpiricalStats:
    hit_rate: float
    exact_hits: np.ndarray
    approximate_hits: np.ndarray
    occupancy: np.ndarray
    measured_requests: int
    warmup_discarded: int
    state_digest: Optional[str] = None

    @property
    def total_exact_hits(self) -> int:
        return int(self.exact_hits.sum())

    @property
    def total_approximate_hits(self) -> int:
        return int(self.approximate_hits.sum())


@dataclass
class MeasuredStats:
    mean_hit_rate: float
    ci95: float
    repetitions: int
    hit_rates: List[float]
    mean_occupancy: np.ndarray
    warmup_fraction: float
    exact_hit_rate: float = 0.0
    approximate_hit_rate: float = 0.0


@dataclass(frozen=True)
class RenewalOracleResult:
    occupancy: float
    standard_error: float
    epoch_occupancy: float
    epoch_standard_error: float
    cycles: int


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StaticAllocation:
    chosen: Tuple[int, ...]
    covered_weight: float


@dataclass(frozen=True)
class LruEstimate:
    item_hit: np.ndarray
    t_c: float
    hit_rate: float
    aggregate_rates: Optional[np.ndarray] = None
    rate_ratio: Optional[Dict[str, float]] = None


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

PRESETS: Dict[str, Dict[str, Any]] = {
    'synthetic-d1': {
        'grid_side': 100, 'hotspots': [(24.0, 24.0), (74.0, 74.0)], 'alpha': 2.5,
        'threshold': 1.0, 'q_rule': 'power', 'q_exponent': 2.0,
        'capacities': [250.0, 500.0, 1000.0], 'max_iterations': 25,
        'trace_length': 200_000, 'repetitions': 50,
    },
    'synthetic-d2': {
        'grid_side': 100, 'hotspots': [(24.0, 24.0), (74.0, 74.0)], 'alpha': 1.4,
        'threshold': 2.0, 'q_rule': 'power', 'q_exponent': 2.0,
        'capacities': [250.0, 500.0, 1000.0], 'max_iterations': 15,
        'trace_length': 200_000, 'repetitions': 50,
    },
    'embedding-d300': {
        'grid_side': None, 'threshold': 300.0, 'q_rule': 'power', 'q_exponent': 0.2,
        'max_iterations': 40, 'trace_length': 100_000, 'tie_break': 'by_id',
    },
    'desk': {
        'grid_side': 20, 'hotspots': [(5.0, 5.0), (15.0, 15.0)], 'alpha': 2.5,
        'threshold': 1.0, 'q_rule': 'power', 'q_exponent': 2.0,
        'capacities': [20.0, 50.0, 100.0], 'trace_length': 40_000, 'repetitions': 10,
    },
}


@dataclass
class ExperimentConfig:
    """Everything a command needs to build a catalog, a workload and the model inputs."""
    grid_side: Optional[int] = 20
    catalog_file: Optional[str] = None
    hotspots: List[Tuple[float, float]] = field(default_factory=lambda: [(5.0, 5.0), (15.0, 15.0)])
    alpha: float = 2.5
    popularity_file: Optional[str] = None
    popularity_trace_file: Optional[str] = None
    threshold: float = 1.0
    tie_break: str = 'auto'
    q_rule: str = 'power'
    q_exponent: float = 2.0
    q_table_file: Optional[str] = None
    capacities: List[float] = field(default_factory=lambda: [20.0, 50.0, 100.0])
    beta: float = 0.5
    tune_beta: bool = False
    beta_samples: int = 8
    max_iterations: int = 100
    occupancy_tol: float = 1e-8
    tc_tol: float = 1e-10
    trace_length: int = 40_000
    trace_file: Optional[str] = None
    repetitions: int = 10
    seed: int = 1
    warmup_fraction: float = 0.1
    workers: int = 1
    preset: Optional[str] = None

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """Build from a plain mapping; a `preset` key seeds the defaults first."""
        from services.exceptions import ValidationError

        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ValidationError(f"Unknown configuration keys: {', '.join(unknown)}", keys=unknown)
        values: Dict[str, Any] = {}
        preset = data.get('preset')
        if preset:
            if preset not in PRESETS:
                raise ValidationError(f"Unknown preset '{preset}'", known=sorted(PRESETS))
            values.update(PRESETS[preset])
            values['preset'] = preset
        values.update({k: v for k, v in data.items() if v is not None or k in ('grid_side',)})
        if values.get('catalog_file') and 'grid_side' not in data:
            values['grid_side'] = None
        if 'hotspots' in values:
            values['hotspots'] = [tuple(float(c) for c in h) for h in values['hotspots']]
        if 'capacities' in values:
            values['capacities'] = [float(c) for c in values['capacities']]
        return cls(**values)

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> 'ExperimentConfig':
        return cls.from_dict({'preset': name, **overrides})

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['hotspots'] = [list(h) for h in self.hotspots]
        return data

    def solver_config(self, beta: Optional[float] = None) -> SolverConfig:
        return SolverConfig(
            beta=self.beta if beta is None else beta,
            max_iterations=self.max_iterations,
            occupancy_tol=self.occupancy_tol,
            tc_tol=self.tc_tol,
        )
