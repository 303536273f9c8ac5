"""
Trace-driven simulators for similarity caches, the single-item RND-TTL renewal
oracle and IRM workload generation
"""
import hashlib
import heapq
import logging
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from models import (
    EmpiricalStats, MeasuredStats, NeighborhoodIndex, Policy, PolicyConfig, PopularityModel,
    RenewalOracleResult, Trace,
)
from services.exceptions import MissingTimestampsError, UnknownItemError, ValidationError
from services.rnd_ttl_model import Acceptance, acceptance_values

logger = logging.getLogger(__name__)

ACCEPTANCE_STREAM = 0xACCE
RENEWAL_BATCH = 100_000
EXACT, APPROXIMATE, MISS = 'exact', 'approximate', 'miss'


def warmup_length(trace_length: int, warmup_fraction: float) -> int:
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValidationError('Warmup fraction must lie in [0, 1)', warmup_fraction=warmup_fraction)
    return int(warmup_fraction * trace_length)


def acceptance_rng(seed: int) -> np.random.Generator:
    """Acceptance draws get their own stream, separate from request sampling"""
    return np.random.default_rng([int(seed), ACCEPTANCE_STREAM])


def _check_trace(trace: Trace, n_items: int) -> np.ndarray:
    requests = np.asarray(trace.requests, dtype=np.int64)
    if requests.size == 0:
        raise ValidationError('Trace is empty')
    if requests.min() < 0 or requests.max() >= n_items:
        bad = int(requests[(requests < 0) | (requests >= n_items)][0])
        raise UnknownItemError(f"Trace references unknown item {bad}", item=bad, n_items=n_items)
    return requests


# ---------------------------------------------------------------------------
# LRU-list caches
# ---------------------------------------------------------------------------

class ListCache:
    """
    Fixed-capacity recency list; the last OrderedDict entry is the front.

    Subclasses decide which cached item (if any) serves a request. Occupancy is
    sampled at request epochs: an item inserted at request t and evicted at
    request e was seen cached by requests t+1 .. e.
    """

    def __init__(self, n_items: int, capacity: int):
        if capacity < 1:
            raise ValidationError('Cache capacity must be at least 1', capacity=capacity)
        self.capacity = int(capacity)
        self.slots: 'OrderedDict[int, int]' = OrderedDict()
        self.epochs_cached = np.zeros(n_items, dtype=np.int64)
        self.window = (0, 0)

    def closest_server(self, n: int) -> Tuple[Optional[int], str]:
        raise NotImplementedError

    def state(self) -> List[int]:
        """Cached ids, most recent first"""
        return list(reversed(self.slots))

    def _credit(self, item: int, inserted_at: int, last_epoch: int) -> None:
        start = max(inserted_at + 1, self.window[0])
        stop = min(last_epoch, self.window[1])
        if stop >= start:
            self.epochs_cached[item] += stop - start + 1

    def request(self, n: int, t: int) -> str:
        server, kind = self.closest_server(n)
        if server is not None:
            self.slots.move_to_end(server)
            return kind
        if len(self.slots) >= self.capacity:
            victim, inserted_at = self.slots.popitem(last=False)
            self._credit(victim, inserted_at, t)
        self.slots[n] = t
        return MISS

    def finish(self, last_epoch: int) -> None:
        for item, inserted_at in self.slots.items():
            self._credit(item, inserted_at, last_epoch)


class LruCache(ListCache):
    """Plain LRU: only exact hits"""

    def closest_server(self, n: int) -> Tuple[Optional[int], str]:
        return (n, EXACT) if n in self.slots else (None, MISS)


class SimLruCache(ListCache):
    """SIM-LRU: the closest cached item within d always serves"""

    def __init__(self, index: NeighborhoodIndex, capacity: int):
        super().__init__(index.num_items, capacity)
        self.rows = [index.neighbors_of(n).tolist() for n in range(index.num_items)]

    def closest_server(self, n: int) -> Tuple[Optional[int], str]:
        if n in self.slots:
            return n, EXACT
        for m in self.rows[n]:
            if m in self.slots:
                return m, APPROXIMATE
        return None, MISS


class RndLruCache(ListCache):
    """
    RND-LRU: the closest cached item m serves a request for n with probability q_m(n).

    A uniform draw u is consumed only when an approximate candidate exists, and
    the candidate is accepted when u < q.
    """

    def __init__(self, index: NeighborhoodIndex, acceptance: Acceptance, capacity: int,
                 rng: np.random.Generator):
        super().__init__(index.num_items, capacity)
        q = acceptance_values(index, acceptance)
        self.rows = [index.neighbors_of(n).tolist() for n in range(index.num_items)]
        self.accept = [q[n, :index.degrees[n]].tolist() for n in range(index.num_items)]
        self.rng = rng

    def closest_server(self, n: int) -> Tuple[Optional[int], str]:
        if n in self.slots:
            return n, EXACT
        for k, m in enumerate(self.rows[n]):
            if m in self.slots:
                if self.rng.random() < self.accept[n][k]:
                    return m, APPROXIMATE
                return None, MISS
        return None, MISS


def run_list_cache(cache: ListCache, trace: Trace, warmup_fraction: float = 0.1,
                   digest: bool = False) -> EmpiricalStats:
    """Drive a list cache over a trace; the first warmup requests only update state"""
    n_items = cache.epochs_cached.shape[0]
    requests = _check_trace(trace, n_items)
    warmup = warmup_length(len(requests), warmup_fraction)
    last = len(requests) - 1
    cache.window = (warmup, last)
    exact = np.zeros(n_items, dtype=np.int64)
    approximate = np.zeros(n_items, dtype=np.int64)
    hasher = hashlib.sha256() if digest else None

    for t, n in enumerate(requests.tolist()):
        outcome = cache.request(n, t)
        if t >= warmup:
            if outcome == EXACT:
                exact[n] += 1
            elif outcome == APPROXIMATE:
                approximate[n] += 1
        if hasher is not None:
            hasher.update(np.asarray(cache.state(), dtype=np.int64).tobytes())
            hasher.update(b'|')
    cache.finish(last)

    measured = len(requests) - warmup
    return EmpiricalStats(
        hit_rate=float(exact.sum() + approximate.sum()) / measured,
        exact_hits=exact,
        approximate_hits=approximate,
        occupancy=cache.epochs_cached / measured,
        measured_requests=measured,
        warmup_discarded=warmup,
        state_digest=hasher.hexdigest() if hasher is not None else None,
    )


def simulate_rnd_lru(index: NeighborhoodIndex, acceptance: Acceptance, trace: Trace, capacity: int,
                     seed: int = 0, warmup_fraction: float = 0.1, digest: bool = False) -> EmpiricalStats:
    cache = RndLruCache(index, acceptance, capacity, acceptance_rng(seed))
    return run_list_cache(cache, trace, warmup_fraction, digest)


def simulate_sim_lru(index: NeighborhoodIndex, trace: Trace, capacity: int,
                     warmup_fraction: float = 0.1, digest: bool = False) -> EmpiricalStats:
    return run_list_cache(SimLruCache(index, capacity), trace, warmup_fraction, digest)


def simulate_lru(n_items: int, trace: Trace, capacity: int, warmup_fraction: float = 0.1,
                 digest: bool = False) -> EmpiricalStats:
    return run_list_cache(LruCache(n_items, capacity), trace, warmup_fraction, digest)


# ---------------------------------------------------------------------------
# TTL similarity cache
# ---------------------------------------------------------------------------

def simulate_ttl_similarity(index: NeighborhoodIndex, acceptance: Acceptance, trace: Trace, timers,
                            seed: int = 0, warmup_fraction: float = 0.1) -> EmpiricalStats:
    """
    TTL-based similarity cache in continuous time.

    Timers are absolute expiry times kept in a heap with lazy deletion; an item
    whose timer reaches zero at or before a request is evicted first. With no
    cached neighbor the tombstone answers and the request misses. Serving resets
    the server's timer; a miss inserts the requested item. Occupancy is the
    cached fraction of [tau_warmup, tau_last].
    """
    if trace.timestamps is None:
        raise MissingTimestampsError('TTL simulation needs request timestamps')
    n_items = index.num_items
    requests = _check_trace(trace, n_items)
    times = np.asarray(trace.timestamps, dtype=float)
    if times.shape != requests.shape or np.any(np.diff(times) < 0):
        raise ValidationError('Timestamps must be nondecreasing and match the requests')
    ttl = np.broadcast_to(np.asarray(timers, dtype=float), (n_items,))
    if np.any(ttl <= 0):
        raise ValidationError('TTL timers must be positive')

    q = acceptance_values(index, acceptance)
    rows = [index.neighbors_of(n).tolist() for n in range(n_items)]
    accept = [q[n, :index.degrees[n]].tolist() for n in range(n_items)]
    rng = acceptance_rng(seed)

    warmup = warmup_length(len(requests), warmup_fraction)
    t_start, t_end = float(times[warmup]), float(times[-1])
    expiry = {}
    inserted = {}
    heap: List[Tuple[float, int]] = []
    cached_time = np.zeros(n_items)
    exact = np.zeros(n_items, dtype=np.int64)
    approximate = np.zeros(n_items, dtype=np.int64)

    def credit(item: int, until: float) -> None:
        start, stop = max(inserted[item], t_start), min(until, t_end)
        if stop > start:
            cached_time[item] += stop - start

    for t, (n, now) in enumerate(zip(requests.tolist(), times.tolist())):
        while heap and heap[0][0] <= now:
            when, item = heapq.heappop(heap)
            if expiry.get(item) == when:
                credit(item, when)
                del expiry[item], inserted[item]

        server = n if n in expiry else None
        kind = EXACT
        if server is None:
            for k, m in enumerate(rows[n]):
                if m in expiry:
                    if rng.random() < accept[n][k]:
                        server, kind = m, APPROXIMATE
                    break

        if server is None:
            server = n
            inserted[n] = now
            kind = MISS
        expiry[server] = now + ttl[server]
        heapq.heappush(heap, (expiry[server], server))

        if t >= warmup:
            if kind == EXACT:
                exact[n] += 1
            elif kind == APPROXIMATE:
                approximate[n] += 1

    for item, when in expiry.items():
        credit(item, when)

    measured = len(requests) - warmup
    span = t_end - t_start
    return EmpiricalStats(
        hit_rate=float(exact.sum() + approximate.sum()) / measured,
        exact_hits=exact,
        approximate_hits=approximate,
        occupancy=cached_time / span if span > 0 else np.zeros(n_items),
        measured_requests=measured,
        warmup_discarded=warmup,
    )


# ---------------------------------------------------------------------------
# Renewal oracle
# ---------------------------------------------------------------------------

def _ratio_estimate(numerator: np.ndarray, denominator: np.ndarray) -> Tuple[float, float]:
    """Ratio of sums with a delta-method standard error"""
    ratio = numerator.sum() / denominator.sum()
    spread = numerator - ratio * denominator
    se = np.sqrt(spread.var(ddof=1) / numerator.size) / denominator.mean() if numerator.size > 1 else 0.0
    return float(ratio), float(se)


def rnd_ttl_renewal_oracle(insertion_rate: float, refresh_rate: float, timer: float, cycles: int,
                           seed: int = 0, sample_rate: Optional[float] = None) -> RenewalOracleResult:
    """
    Monte Carlo occupancy of one RND-TTL item.

    Each cycle is an exponential Off period (rate insertion_rate) followed by an On
    period: refresh events reset the timer, so On lasts T plus every refresh gap
    shorter than T before the first gap of at least T. Epoch occupancy counts an
    independent Poisson sampling stream landing in On periods.
    """
    if insertion_rate <= 0 or timer <= 0 or refresh_rate < 0:
        raise ValidationError('Renewal oracle needs insertion_rate > 0, timer > 0, refresh_rate >= 0')
    if cycles < 2:
        raise ValidationError('Renewal oracle needs at least two cycles', cycles=cycles)
    rng = np.random.default_rng(seed)
    sampling = sample_rate if sample_rate is not None else max(insertion_rate, refresh_rate)

    on_parts, off_parts, samples_on, samples_off = [], [], [], []
    for start in range(0, cycles, RENEWAL_BATCH):
        size = min(RENEWAL_BATCH, cycles - start)
        off = rng.exponential(1.0 / insertion_rate, size)
        on = np.full(size, float(timer))
        if refresh_rate > 0:
            stay = -np.expm1(-refresh_rate * timer)
            resets = rng.geometric(1.0 - stay, size) - 1
            total = int(resets.sum())
            if total:
                u = rng.random(total)
                gaps = -np.log1p(-u * stay) / refresh_rate
                owner = np.repeat(np.arange(size), resets)
                on += np.bincount(owner, weights=gaps, minlength=size)
        on_parts.append(on)
        off_parts.append(off)
        samples_on.append(rng.poisson(sampling * on))
        samples_off.append(rng.poisson(sampling * off))

    on = np.concatenate(on_parts)
    length = on + np.concatenate(off_parts)
    occupancy, se = _ratio_estimate(on, length)
    hits = np.concatenate(samples_on).astype(float)
    seen = hits + np.concatenate(samples_off)
    epoch, epoch_se = _ratio_estimate(hits, seen)
    return RenewalOracleResult(occupancy=occupancy, standard_error=se, epoch_occupancy=epoch,
                               epoch_standard_error=epoch_se, cycles=cycles)


# ---------------------------------------------------------------------------
# Workloads and measurement
# ---------------------------------------------------------------------------

def generate_irm_trace(popularity: PopularityModel, length: int, seed: int,
                       with_timestamps: bool = False) -> Trace:
    """i.i.d. requests drawn from the popularity rates; unit-rate Poisson timestamps"""
    if length < 1:
        raise ValidationError('Trace length must be at least 1', length=length)
    rng = np.random.default_rng(seed)
    rates = popularity.rates
    requests = rng.choice(rates.shape[0], size=length, p=rates)
    timestamps = np.cumsum(rng.exponential(1.0, length)) if with_timestamps else None
    return Trace(requests=requests.astype(np.int64), timestamps=timestamps, seed=seed)


def run_policy(config: PolicyConfig, index: NeighborhoodIndex, acceptance: Acceptance, trace: Trace,
               seed: int) -> EmpiricalStats:
    shape = index.neighbors.shape
    if config.policy == Policy.RND_LRU:
        return simulate_rnd_lru(index, acceptance, trace, config.capacity, seed, config.warmup_fraction)
    if config.policy == Policy.SIM_LRU:
        return simulate_rnd_lru(index, np.ones(shape), trace, config.capacity, seed, config.warmup_fraction)
    if config.policy == Policy.LRU:
        return simulate_rnd_lru(index, np.zeros(shape), trace, config.capacity, seed, config.warmup_fraction)
    if config.policy == Policy.TTL:
        if config.timer is None:
            raise ValidationError('TTL policy needs a timer')
        return simulate_ttl_similarity(index, acceptance, trace, config.timer, seed, config.warmup_fraction)
    raise ValidationError(f"Unknown policy '{config.policy}'")


def _run_repetition(args) -> EmpiricalStats:
    return run_policy(*args)


def measure_policy(config: PolicyConfig, index: NeighborhoodIndex, acceptance: Acceptance,
                   traces: Sequence[Trace], seeds: Optional[Sequence[int]] = None,
                   workers: int = 1) -> MeasuredStats:
    """Mean empirical hit rate over repetitions with a normal 95% half-width"""
    if not traces:
        raise ValidationError('measure_policy needs at least one trace')
    seeds = list(seeds) if seeds is not None else [t.seed if t.seed is not None else i
                                                   for i, t in enumerate(traces)]
    jobs = [(config, index, acceptance, trace, seed) for trace, seed in zip(traces, seeds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_repetition, jobs))
    else:
        runs = [_run_repetition(job) for job in jobs]

    rates = np.array([r.hit_rate for r in runs])
    n = rates.size
    half_width = 1.96 * rates.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    logger.info(f"{config.policy.value} C={config.capacity}: hit rate {rates.mean():.5f} +/- {half_width:.2e} over {n} runs")
    return MeasuredStats(
        mean_hit_rate=float(rates.mean()),
        ci95=float(half_width),
        repetitions=n,
        hit_rates=rates.tolist(),
        mean_occupancy=np.mean([r.occupancy for r in runs], axis=0),
        warmup_fraction=config.warmup_fraction,
        exact_hit_rate=float(np.mean([r.total_exact_hits / r.measured_requests for r in runs])),
        approximate_hit_rate=float(np.mean([r.total_approximate_hits / r.measured_requests for r in runs])),
    )
