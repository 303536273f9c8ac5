"""
Closed-form RND-TTL quantities: the per-item occupancy g, insertion and refresh
rates induced by an occupancy vector, the capacity residual and its root, hit
probabilities and the product-form state distribution.

All vector functions work on the padded neighbor rows of a NeighborhoodIndex.
Products over "items closer than m" are exclusive prefix products along a row.
"""
import logging
from typing import Iterable, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from models import (
    AcceptanceProbabilities, HitReport, NeighborhoodIndex, OccupancyVector,
)
from services.exceptions import BudgetExceededError, ModelError, NoRootError, ValidationError

logger = logging.getLogger(__name__)

SMALL_EXPONENT = 1e-8
SERIES_EXPONENT = 1e-2
MAX_BRACKET_DOUBLINGS = 2000
MAX_BISECTIONS = 400
FORM_AGREEMENT_TOL = 1e-12

Acceptance = Union[AcceptanceProbabilities, np.ndarray]


# ---------------------------------------------------------------------------
# Occupancy function g
# ---------------------------------------------------------------------------

def _check_g_inputs(x1, x2, x3) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x1, x2, x3 = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (x1, x2, x3)))
    for name, value in (('refresh rate', x1), ('insertion rate', x2), ('timer', x3)):
        if np.any(~(value >= 0)):
            raise ValidationError(f"Occupancy function needs a nonnegative {name}")
    return x1, x2, x3


def _log_mean_on_time(x1: np.ndarray, x3: np.ndarray) -> np.ndarray:
    """log of expm1(x1 * x3) / x1, the mean On period; x3 for x1 -> 0"""
    u = x1 * x3
    small = u < SMALL_EXPONENT
    u_safe = np.where(small, 1.0, u)
    x1_safe = np.where(small, 1.0, x1)
    with np.errstate(divide='ignore'):
        series = np.log(x3) + np.log1p(u / 2.0)
        exact = u_safe + np.log(-np.expm1(-u_safe)) - np.log(x1_safe)
    return np.where(small, series, exact)


def _log_mean_on_time_slope(x1: np.ndarray, x3: np.ndarray) -> np.ndarray:
    """log of d/dx1 [expm1(x1 * x3) / x1]"""
    u = x1 * x3
    small = u < SERIES_EXPONENT
    u_safe = np.where(small, 1.0, u)
    x1_safe = np.where(small, 1.0, x1)
    series = 0.5 + u / 3.0 + u ** 2 / 8.0 + u ** 3 / 30.0 + u ** 4 / 144.0
    with np.errstate(divide='ignore'):
        near = 2.0 * np.log(x3) + np.log(series)
        far = u_safe + np.log(u_safe + np.expm1(-u_safe)) - 2.0 * np.log(x1_safe)
    return np.where(small, near, far)


def occupancy_g(refresh, insertion, timer):
    """Stationary occupancy of an RND-TTL item.

    Parameters
    ----------
    refresh : float or array
        Refresh rate x1 (timer resets while cached).
    insertion : float or array
        Insertion rate x2 (admissions while not cached).
    timer : float or array
        Common TTL x3.

    Returns
    -------
    g : float or array
        x2 E / (1 + x2 E) with E = expm1(x1 x3) / x1 the mean On period,
        evaluated in log space; 0 when x2 = 0 or x3 = 0.
    """
    x1, x2, x3 = _check_g_inputs(refresh, insertion, timer)
    log_e = _log_mean_on_time(x1, x3)
    with np.errstate(divide='ignore'):
        s = np.log(x2) + log_e
    g = np.where((x2 > 0) & (x3 > 0), expit(s), 0.0)
    return g if g.ndim else float(g)


def occupancy_g_partials(refresh, insertion, timer):
    """
    Analytic partials (dg/dx1, dg/dx2, dg/dx3), all nonnegative.

    With E the mean On period and (1 - g)^2 = exp(-2 log(1 + x2 E)):
    dg/dx2 = E (1-g)^2, dg/dx3 = x2 exp(x1 x3) (1-g)^2, dg/dx1 = x2 dE/dx1 (1-g)^2.
    """
    x1, x2, x3 = _check_g_inputs(refresh, insertion, timer)
    log_e = _log_mean_on_time(x1, x3)
    with np.errstate(divide='ignore', invalid='ignore'):
        log_x2 = np.log(x2)
        damping = 2.0 * np.logaddexp(0.0, log_x2 + log_e)
        d2 = np.exp(log_e - damping)
        d3 = np.exp(log_x2 + x1 * x3 - damping)
        d1 = np.exp(log_x2 + _log_mean_on_time_slope(x1, x3) - damping)
    d1 = np.nan_to_num(d1, nan=0.0)
    d3 = np.nan_to_num(d3, nan=0.0)
    d2 = np.nan_to_num(d2, nan=0.0)
    if d1.ndim == 0:
        return float(d1), float(d2), float(d3)
    return d1, d2, d3


# ---------------------------------------------------------------------------
# Neighbor-row helpers
# ---------------------------------------------------------------------------

def acceptance_values(index: NeighborhoodIndex, acceptance: Acceptance) -> np.ndarray:
    values = acceptance.values if isinstance(acceptance, AcceptanceProbabilities) else np.asarray(acceptance)
    if values.shape != index.neighbors.shape:
        raise ValidationError('Acceptance matrix does not match the neighborhood index',
                              expected=list(index.neighbors.shape), got=list(values.shape))
    masked = values[index.mask]
    if np.any(~((masked >= 0) & (masked <= 1))):
        raise ValidationError('Acceptance probabilities must lie in [0, 1]')
    return np.where(index.mask, values, 0.0)


def _check_occupancy(occupancy, n_items: int) -> np.ndarray:
    o = np.asarray(occupancy.values if isinstance(occupancy, OccupancyVector) else occupancy, dtype=float)
    if o.shape != (n_items,):
        raise ValidationError('Occupancy vector has the wrong length', expected=n_items, got=list(o.shape))
    if np.any(~((o >= -1e-12) & (o <= 1 + 1e-12))):
        raise ValidationError('Occupancies must lie in [0, 1]')
    return np.clip(o, 0.0, 1.0)


def neighbor_products(index: NeighborhoodIndex, o: np.ndarray):
    """
    Returns (safe ids, neighbor occupancies, exclusive prefix products, full products).

    prefix[n, k] = prod over j < k of (1 - o[neighbors[n, j]]); padded slots count as empty.
    """
    mask = index.mask
    safe = np.where(mask, index.neighbors, 0)
    occ = np.where(mask, o[safe], 0.0)
    running = np.ones((index.num_items, index.max_degree + 1))
    running[:, 1:] = np.cumprod(1.0 - occ, axis=1)
    return safe, occ, running[:, :-1], running[:, -1]


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------

def insertion_probs(index: NeighborhoodIndex, acceptance: Acceptance, occupancy) -> np.ndarray:
    """p^i_n: probability that a request for n is a miss given n is not cached"""
    q = acceptance_values(index, acceptance)
    o = _check_occupancy(occupancy, index.num_items)
    _, occ, prefix, full = neighbor_products(index, o)
    p = full + ((1.0 - q) * occ * prefix).sum(axis=1)
    return np.clip(p, 0.0, 1.0)


def insertion_rates(index: NeighborhoodIndex, acceptance: Acceptance, rates, occupancy) -> np.ndarray:
    return np.asarray(rates, dtype=float) * insertion_probs(index, acceptance, occupancy)


def refresh_rates(index: NeighborhoodIndex, acceptance: Acceptance, rates, occupancy) -> np.ndarray:
    """
    lambda^r_n = lambda_n + sum over neighbors m of q_n(m) lambda_m times the
    probability that nothing in N[m] closer to m than n is cached.
    """
    q = acceptance_values(index, acceptance)
    o = _check_occupancy(occupancy, index.num_items)
    lam = np.asarray(rates, dtype=float)
    safe, _, prefix, _ = neighbor_products(index, o)
    mask = index.mask
    pos = np.where(mask, index.reverse, 0)
    served = np.where(mask, q[safe, pos] * lam[safe] * (1.0 - o[safe]) * prefix[safe, pos], 0.0)
    return lam + served.sum(axis=1)


# ---------------------------------------------------------------------------
# Capacity equation
# ---------------------------------------------------------------------------

def expected_occupancy(refresh: np.ndarray, insertion: np.ndarray, timer: float) -> float:
    return float(np.sum(occupancy_g(refresh, insertion, timer)))


def capacity_residual(index: NeighborhoodIndex, acceptance: Acceptance, rates, occupancy,
                      timer: float, capacity: float) -> float:
    """F(o, T) = sum_n g(R_n(o), E_n(o), T) - C"""
    if timer < 0:
        raise ValidationError('Timer must be nonnegative', timer=timer)
    refresh = refresh_rates(index, acceptance, rates, occupancy)
    insertion = insertion_rates(index, acceptance, rates, occupancy)
    return expected_occupancy(refresh, insertion, timer) - capacity


def characteristic_time(refresh: np.ndarray, insertion: np.ndarray, capacity: float,
                        tol: float = 1e-10, start: Optional[float] = None) -> float:
    """
    Root in T of sum_n g(refresh_n, insertion_n, T) = C.

    Bisection on [0, hi], hi starting at `start` (callers pass the LRU characteristic
    time) or at C / sum(insertion) without one, and doubling until the residual
    turns nonnegative. Stops once |residual| <= tol or the bracket cannot
    shrink further in floating point.
    """
    refresh = np.asarray(refresh, dtype=float)
    insertion = np.asarray(insertion, dtype=float)
    positive = int(np.count_nonzero(insertion > 0))
    if positive <= capacity:
        raise NoRootError(
            'Capacity equation has no root: too few items with positive insertion rate',
            positive_items=positive, capacity=capacity,
        )

    def residual(t: float) -> float:
        return expected_occupancy(refresh, insertion, t) - capacity

    lo, hi = 0.0, capacity / float(insertion.sum())
    if start is not None and np.isfinite(start) and start > 0:
        hi = float(start)
    f_hi = residual(hi)
    doublings = 0
    while f_hi < 0:
        lo = hi
        hi *= 2.0
        f_hi = residual(hi)
        doublings += 1
        if doublings > MAX_BRACKET_DOUBLINGS or not np.isfinite(hi):
            raise NoRootError('Capacity equation root could not be bracketed', capacity=capacity)
    if abs(f_hi) <= tol:
        return hi

    mid = 0.5 * (lo + hi)
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        f_mid = residual(mid)
        if abs(f_mid) <= tol:
            return mid
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            logger.debug(f"Bisection stalled at |F|={abs(f_mid):.3e}, bracket width {hi - lo:.3e}")
            return mid
    return mid


def solve_characteristic_time(index: NeighborhoodIndex, acceptance: Acceptance, rates, occupancy,
                              capacity: float, tol: float = 1e-10) -> float:
    """
    t_C(o): the timer that makes the expected number of cached items equal C.
    The bracket starts from the LRU characteristic time of the request rates.
    """
    lam = np.asarray(rates, dtype=float)
    refresh = refresh_rates(index, acceptance, lam, occupancy)
    insertion = insertion_rates(index, acceptance, lam, occupancy)
    lru_time = characteristic_time(lam, lam, capacity, tol)
    return characteristic_time(refresh, insertion, capacity, tol, start=lru_time)


# ---------------------------------------------------------------------------
# Hit probabilities
# ---------------------------------------------------------------------------

def item_hit_probs(index: NeighborhoodIndex, acceptance: Acceptance, occupancy,
                   p_insert=None) -> np.ndarray:
    """
    h_n = o_n + sum_m q_m(n) o_m prod over N[n] closer than m of (1 - o_j).

    The RND-TTL form o_n + (1 - o_n)(1 - p^i_n) is evaluated alongside, with p^i
    taken from `p_insert` when given and computed from the occupancy otherwise.
    The two agree by telescoping of the prefix products; a gap above 1e-12 raises
    ModelError.
    """
    q = acceptance_values(index, acceptance)
    o = _check_occupancy(occupancy, index.num_items)
    _, occ, prefix, full = neighbor_products(index, o)
    approximate = (q * occ * prefix).sum(axis=1)
    h = o + (1.0 - o) * approximate

    if p_insert is None:
        p_insert = np.clip(full + ((1.0 - q) * occ * prefix).sum(axis=1), 0.0, 1.0)
    else:
        p_insert = np.asarray(p_insert, dtype=float)
        if p_insert.shape != o.shape:
            raise ValidationError('Insertion probabilities have the wrong length',
                                  expected=index.num_items, got=list(p_insert.shape))
    ttl_form = o + (1.0 - o) * (1.0 - p_insert)
    gap = float(np.max(np.abs(h - ttl_form))) if h.size else 0.0
    if gap > FORM_AGREEMENT_TOL:
        worst = int(np.argmax(np.abs(h - ttl_form)))
        raise ModelError(f"Hit probability forms disagree by {gap:.3e}", item=worst,
                         tolerance=FORM_AGREEMENT_TOL)
    return np.clip(h, o, 1.0)


def aggregate_hit_rate(rates, item_hit) -> float:
    """H = sum_n lambda_n h_n"""
    return float(np.dot(np.asarray(rates, dtype=float), np.asarray(item_hit, dtype=float)))


def hit_report(index: NeighborhoodIndex, acceptance: Acceptance, rates, occupancy) -> HitReport:
    h = item_hit_probs(index, acceptance, occupancy)
    return HitReport(item_hit=h, hit_rate=aggregate_hit_rate(rates, h))


# ---------------------------------------------------------------------------
# State distribution
# ---------------------------------------------------------------------------

def state_probability(occupancy, state: Iterable[int]) -> float:
    """pi_S = prod_{n in S} o_n prod_{m not in S} (1 - o_m)"""
    o = np.asarray(occupancy.values if isinstance(occupancy, OccupancyVector) else occupancy, dtype=float)
    members = np.zeros(o.shape[0], dtype=bool)
    ids = np.fromiter((int(s) for s in state), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= o.shape[0]):
        raise ValidationError('State references ids outside the catalog')
    members[ids] = True
    return float(np.prod(np.where(members, o, 1.0 - o)))


def state_distribution(occupancy, max_items: int = 20) -> np.ndarray:
    """Probabilities of all 2^N cache states, indexed by the bitmask of cached ids"""
    o = np.asarray(occupancy.values if isinstance(occupancy, OccupancyVector) else occupancy, dtype=float)
    n_items = o.shape[0]
    if n_items > max_items:
        raise BudgetExceededError('State enumeration refused: catalog above budget',
                                  n_items=n_items, max_items=max_items)
    states = np.arange(1 << n_items, dtype=np.int64)
    probs = np.ones(states.shape[0])
    for n in range(n_items):
        cached = ((states >> n) & 1).astype(bool)
        probs *= np.where(cached, o[n], 1.0 - o[n])
    return probs
