"""
Damped fixed point iteration for the RND-TTL occupancy vector
"""
import logging
from typing import Optional, Tuple

import numpy as np

from models import (
    HitReport, IterationRecord, NeighborhoodIndex, OccupancyVector, RndTtlParams, SolverConfig,
    SolverResult, SolverTrace, StopReason,
)
from services.exceptions import NoRootError, SolverError, ValidationError
from services.rnd_ttl_model import (
    Acceptance, acceptance_values, aggregate_hit_rate, characteristic_time, insertion_rates,
    item_hit_probs, occupancy_g, refresh_rates,
)

logger = logging.getLogger(__name__)

SATURATION_GAP = 1e-9


def validate_config(config: SolverConfig) -> None:
    if not 0.0 <= config.beta < 1.0:
        raise ValidationError('Damping beta must lie in [0, 1)', beta=config.beta)
    if config.max_iterations < 1:
        raise ValidationError('max_iterations must be positive', max_iterations=config.max_iterations)
    if config.occupancy_tol < 0 or config.tc_tol <= 0:
        raise ValidationError('Tolerances must be nonnegative (tc_tol positive)',
                              occupancy_tol=config.occupancy_tol, tc_tol=config.tc_tol)


def initial_occupancy(rates, capacity: float, tc_tol: float = 1e-10) -> Tuple[np.ndarray, float]:
    """LRU start: o_n = 1 - exp(-lambda_n t_C(0)) with sum_n o_n = C"""
    lam = np.asarray(rates, dtype=float)
    t0 = characteristic_time(lam, lam, capacity, tc_tol)
    return -np.expm1(-lam * t0), t0


def map_g(index: NeighborhoodIndex, acceptance: Acceptance, rates, capacity: float, occupancy,
          tc_tol: float = 1e-10, t_start: Optional[float] = None) -> Tuple[np.ndarray, float, RndTtlParams]:
    """
    G(o) = g(R(o), E(o), t_C(o)); returns (G(o), t_C(o), parameters at o).
    `t_start` seeds the t_C bracket, the solver passes the LRU t_C(0).
    """
    refresh = refresh_rates(index, acceptance, rates, occupancy)
    insertion = insertion_rates(index, acceptance, rates, occupancy)
    t_c = characteristic_time(refresh, insertion, capacity, tc_tol, start=t_start)
    image = np.asarray(occupancy_g(refresh, insertion, t_c))
    return image, t_c, RndTtlParams(insertion_rates=insertion, refresh_rates=refresh, timer=t_c)


def map_g_beta(index: NeighborhoodIndex, acceptance: Acceptance, rates, capacity: float, occupancy,
               beta: float, tc_tol: float = 1e-10) -> np.ndarray:
    """G_beta(o) = (1 - beta) G(o) + beta o"""
    if not 0.0 <= beta < 1.0:
        raise ValidationError('Damping beta must lie in [0, 1)', beta=beta)
    o = np.asarray(occupancy.values if isinstance(occupancy, OccupancyVector) else occupancy, dtype=float)
    image, _, _ = map_g(index, acceptance, rates, capacity, o, tc_tol)
    return (1.0 - beta) * image + beta * o


def solve(index: NeighborhoodIndex, acceptance: Acceptance, rates, capacity: float,
          config: Optional[SolverConfig] = None) -> SolverResult:
    """
    Run the damped iteration o(j) = (1 - beta) G(o(j-1)) + beta o(j-1) from the LRU start.

    Stops when the sup-norm step falls to occupancy_tol or after max_iterations.
    Record j carries t_C(j) = t_C(o(j-1)), h(j), H(j) and the step; its residual
    |o(j) - G(o(j))| is filled by the following evaluation of G.
    """
    config = config or SolverConfig()
    validate_config(config)
    lam = np.asarray(rates, dtype=float)
    n_items = index.num_items
    if lam.shape != (n_items,):
        raise ValidationError('Rate vector has the wrong length', expected=n_items, got=list(lam.shape))
    if abs(lam.sum() - 1.0) > 1e-6 or np.any(lam < 0):
        raise ValidationError('Request rates must be a probability vector', total=float(lam.sum()))
    if not 0 < capacity < n_items:
        raise ValidationError('Solver needs 0 < C < N', capacity=capacity, n_items=n_items)
    acceptance_values(index, acceptance)

    try:
        o, t_c0 = initial_occupancy(lam, capacity, config.tc_tol)
    except NoRootError as exc:
        raise SolverError(f"Initial characteristic time failed: {exc.message}", iteration=0) from exc

    saturated = int(np.count_nonzero((o >= 1.0 - SATURATION_GAP) & (index.degrees > 0)))
    if saturated:
        logger.warning(
            f"LRU start leaves {saturated} items with neighbors within {SATURATION_GAP:g} of full occupancy; "
            f"items next to them start with near-zero insertion rates and the first iterations can empty them"
        )

    trace = SolverTrace()
    trace.records.append(_record(index, acceptance, lam, o, 0, t_c0, float('nan'), config))

    stop_reason = StopReason.MAX_ITERATIONS
    for j in range(1, config.max_iterations + 1):
        try:
            image, t_c, _ = map_g(index, acceptance, lam, capacity, o, config.tc_tol, t_c0)
        except NoRootError as exc:
            raise SolverError(f"Characteristic time failed at iteration {j}: {exc.message}",
                              iteration=j) from exc
        trace.records[-1].residual = float(np.max(np.abs(o - image)))
        new_o = (1.0 - config.beta) * image + config.beta * o
        step = float(np.max(np.abs(new_o - o)))
        o = new_o
        trace.records.append(_record(index, acceptance, lam, o, j, t_c, step, config))
        logger.debug(f"Iteration {j}: t_C={t_c:.6g}, H={trace.records[-1].hit_rate:.6f}, step={step:.3e}")
        if step <= config.occupancy_tol:
            stop_reason = StopReason.TOLERANCE
            break

    try:
        image, t_final, params = map_g(index, acceptance, lam, capacity, o, config.tc_tol, t_c0)
    except NoRootError as exc:
        raise SolverError(f"Characteristic time failed at the final iterate: {exc.message}",
                          iteration=len(trace) - 1) from exc
    trace.records[-1].residual = float(np.max(np.abs(o - image)))

    h = item_hit_probs(index, acceptance, o)
    converged = stop_reason == StopReason.TOLERANCE
    logger.info(
        f"Fixed point {'converged' if converged else 'stopped'} after {len(trace) - 1} iterations: "
        f"C={capacity}, t_C={t_final:.6g}, t_C(0)={t_c0:.6g}, H={aggregate_hit_rate(lam, h):.6f}"
    )
    return SolverResult(
        occupancy=OccupancyVector(values=o, capacity=capacity),
        hits=HitReport(item_hit=h, hit_rate=aggregate_hit_rate(lam, h)),
        t_c=t_final,
        t_c0=t_c0,
        trace=trace,
        converged=converged,
        stop_reason=stop_reason,
        params=params,
        saturated_start=saturated,
    )


def _record(index, acceptance, lam, o, iteration, t_c, step, config) -> IterationRecord:
    h = item_hit_probs(index, acceptance, o)
    return IterationRecord(
        iteration=iteration,
        t_c=float(t_c),
        hit_rate=aggregate_hit_rate(lam, h),
        step_norm=step,
        occupancy=o.copy() if config.keep_vectors else None,
        item_hit=h if config.keep_vectors else None,
    )
