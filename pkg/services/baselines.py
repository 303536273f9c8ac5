"""
Baseline hit-rate estimators: LRU Che approximation, LRU with aggregated
neighborhood rates, greedy static coverage and the exact static optimum
"""
import logging
import math

import numpy as np

from models import LruEstimate, NeighborhoodIndex, StaticAllocation
from services.catalog import CatalogService
from services.exceptions import BudgetExceededError, ValidationError
from services.rnd_ttl_model import aggregate_hit_rate, characteristic_time

logger = logging.getLogger(__name__)


class BaselineService:
    """Comparison estimators for the RND-TTL prediction"""

    @staticmethod
    def _check_capacity(rates: np.ndarray, capacity: float) -> None:
        if not 0 < capacity < rates.shape[0]:
            raise ValidationError('Baseline needs 0 < C < N', capacity=capacity, n_items=int(rates.shape[0]))

    @staticmethod
    def lru_ttl_estimate(rates, capacity: float, tol: float = 1e-10) -> LruEstimate:
        """Che approximation: h_n = 1 - exp(-lambda_n t_C), sum_n h_n = C"""
        lam = np.asarray(rates, dtype=float)
        BaselineService._check_capacity(lam, capacity)
        t_c = characteristic_time(lam, lam, capacity, tol)
        h = -np.expm1(-lam * t_c)
        return LruEstimate(item_hit=h, t_c=t_c, hit_rate=aggregate_hit_rate(lam, h))

    @staticmethod
    def aggregate_rates(index: NeighborhoodIndex, rates) -> np.ndarray:
        """lambda~_n = sum of lambda over the closed neighborhood N[n]"""
        lam = np.asarray(rates, dtype=float)
        mask = index.mask
        return lam + np.where(mask, lam[np.where(mask, index.neighbors, 0)], 0.0).sum(axis=1)

    @staticmethod
    def lru_agg_estimate(index: NeighborhoodIndex, rates, capacity: float, tol: float = 1e-10) -> LruEstimate:
        """
        LRU whose per-item rate is the aggregate rate of its closed neighborhood.

        The occupancies o_n = h_n = 1 - exp(-lambda~_n t_C) are constrained to sum to C.
        """
        lam = np.asarray(rates, dtype=float)
        BaselineService._check_capacity(lam, capacity)
        agg = BaselineService.aggregate_rates(index, lam)
        t_c = characteristic_time(agg, agg, capacity, tol)
        h = -np.expm1(-agg * t_c)
        ratio = agg[lam > 0] / lam[lam > 0]
        summary = None
        if ratio.size:
            summary = {'min': float(ratio.min()), 'median': float(np.median(ratio)), 'max': float(ratio.max())}
            logger.debug(f"Aggregate/own rate ratio: {summary}")
        return LruEstimate(item_hit=h, t_c=t_c, hit_rate=aggregate_hit_rate(lam, h),
                           aggregate_rates=agg, rate_ratio=summary)

    @staticmethod
    def greedy_coverage(index: NeighborhoodIndex, rates, capacity: float) -> StaticAllocation:
        """Greedy max weighted coverage of closed neighborhoods with floor(C) items"""
        if capacity < 1:
            raise ValidationError('Greedy coverage needs C >= 1', capacity=capacity)
        chosen, covered = CatalogService.greedy_max_coverage(
            index, np.asarray(rates, dtype=float), int(math.floor(capacity)), closed=True
        )
        return StaticAllocation(chosen=tuple(sorted(chosen)), covered_weight=min(covered, 1.0))

    @staticmethod
    def exact_static_optimum(index: NeighborhoodIndex, rates, capacity: float,
                             max_items: int = 25) -> StaticAllocation:
        """Optimal static allocation by branch and bound; refused above max_items"""
        if index.num_items > max_items:
            raise BudgetExceededError('Exact static optimum refused: catalog above budget',
                                      n_items=index.num_items, max_items=max_items)
        if capacity < 1:
            raise ValidationError('Static optimum needs C >= 1', capacity=capacity)
        masks = CatalogService.neighborhood_masks(index, closed=True)
        chosen, covered = CatalogService.exact_max_coverage(
            masks, np.asarray(rates, dtype=float), int(math.floor(capacity))
        )
        return StaticAllocation(chosen=chosen, covered_weight=min(covered, 1.0))
