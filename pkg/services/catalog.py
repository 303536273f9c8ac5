"""
Service for catalog construction, neighborhood indexing and coverage queries
"""
import logging
import math
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from models import (
    AcceptanceProbabilities, Catalog, CoverCheckResult, CoverStatus, DissimilaritySpec,
    NeighborhoodIndex, PopularityModel, TieBreak,
)
from services.exceptions import (
    BudgetExceededError, DimensionMismatchError, ValidationError,
)

logger = logging.getLogger(__name__)

DISTANCE_CHUNK_ROWS = 1024
DISTANCE_SLACK = 1e-12


class CatalogService:
    """Item universe, dissimilarity structure and popularity generation"""

    @staticmethod
    def from_embeddings(embeddings: Sequence[Sequence[float]]) -> Catalog:
        """Validate a list of embeddings and freeze it into a Catalog"""
        rows = list(embeddings)
        if not rows:
            return Catalog(embeddings=np.zeros((0, 0)))
        dims = {len(r) for r in rows}
        if len(dims) != 1:
            raise DimensionMismatchError(
                'Catalog embeddings do not share one dimension', dimensions=sorted(dims)
            )
        return Catalog(embeddings=np.asarray(rows, dtype=float))

    @staticmethod
    def grid_catalog(side: int) -> Catalog:
        """side x side integer grid; item (x, y) gets id x * side + y"""
        if side < 1:
            raise ValidationError('Grid side must be at least 1', side=side)
        xs, ys = np.meshgrid(np.arange(side), np.arange(side), indexing='ij')
        embeddings = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
        logger.info(f"Built {side}x{side} grid catalog with {len(embeddings)} items")
        return Catalog(embeddings=embeddings)

    @staticmethod
    def build_neighborhood_index(catalog: Catalog, spec: DissimilaritySpec,
                                 tie_break: TieBreak = TieBreak.BY_ID) -> NeighborhoodIndex:
        """
        Build the open neighborhoods of every item.

        Neighbors are the items within distance d (inclusive), sorted by distance and
        then by the tie-break key. Pairwise distances are computed in row chunks.
        """
        if spec.threshold < 0:
            raise ValidationError('Similarity threshold must be nonnegative', threshold=spec.threshold)
        embeddings = catalog.embeddings
        n_items = len(catalog)
        tie_break = TieBreak(tie_break)
        if tie_break == TieBreak.COUNTERCLOCKWISE and n_items and catalog.dimension != 2:
            raise DimensionMismatchError(
                'Counterclockwise tie-break needs a 2D catalog', dimension=catalog.dimension
            )

        rows: List[np.ndarray] = []
        dists: List[np.ndarray] = []
        for start in range(0, n_items, DISTANCE_CHUNK_ROWS):
            stop = min(start + DISTANCE_CHUNK_ROWS, n_items)
            block = cdist(embeddings[start:stop], embeddings, metric=spec.metric.value)
            for offset, distance_row in enumerate(block):
                n = start + offset
                candidates = np.flatnonzero(distance_row <= spec.threshold + DISTANCE_SLACK)
                candidates = candidates[candidates != n]
                cand_dist = distance_row[candidates]
                if tie_break == TieBreak.COUNTERCLOCKWISE:
                    delta = embeddings[candidates] - embeddings[n]
                    key = np.mod(np.arctan2(delta[:, 1], delta[:, 0]), 2 * np.pi)
                else:
                    key = candidates
                order = np.lexsort((key, cand_dist))
                rows.append(candidates[order])
                dists.append(cand_dist[order])

        degrees = np.array([len(r) for r in rows], dtype=np.int64)
        width = int(degrees.max()) if n_items else 0
        neighbors = np.full((n_items, width), -1, dtype=np.int64)
        distances = np.zeros((n_items, width))
        for n, (row, dist) in enumerate(zip(rows, dists)):
            neighbors[n, :len(row)] = row
            distances[n, :len(row)] = dist

        reverse = CatalogService._reverse_positions(neighbors)
        logger.info(
            f"Neighborhood index: N={n_items}, d={spec.threshold}, max degree={width}, "
            f"mean degree={degrees.mean() if n_items else 0:.2f}"
        )
        return NeighborhoodIndex(
            neighbors=neighbors, distances=distances, reverse=reverse,
            degrees=degrees, threshold=float(spec.threshold), tie_break=tie_break,
        )

    @staticmethod
    def _reverse_positions(neighbors: np.ndarray) -> np.ndarray:
        """reverse[n, k] = position of n in the row of neighbors[n, k]"""
        n_items, width = neighbors.shape
        reverse = np.full((n_items, width), -1, dtype=np.int64)
        src, pos = np.nonzero(neighbors >= 0)
        if src.size == 0:
            return reverse
        dst = neighbors[src, pos]
        keys = src * n_items + dst
        order = np.argsort(keys)
        sorted_keys = keys[order]
        lookup = np.searchsorted(sorted_keys, dst * n_items + src)
        lookup = np.minimum(lookup, sorted_keys.size - 1)
        if not np.array_equal(sorted_keys[lookup], dst * n_items + src):
            raise ValidationError('Neighborhood relation is not symmetric')
        reverse[src, pos] = pos[order[lookup]]
        return reverse

    # ------------------------------------------------------------------
    # Popularity
    # ------------------------------------------------------------------

    @staticmethod
    def popularity_from_weights(weights: Iterable[float]) -> PopularityModel:
        weights = np.asarray(list(weights) if not isinstance(weights, np.ndarray) else weights, dtype=float)
        if weights.size == 0:
            raise ValidationError('Popularity needs a nonempty catalog')
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValidationError('Popularity weights must be finite and nonnegative')
        total = weights.sum()
        if total <= 0:
            raise ValidationError('Popularity weights sum to zero')
        return PopularityModel(weights=weights, rates=weights / total)

    @staticmethod
    def synthetic_popularity(catalog: Catalog, hotspots: Sequence[Sequence[float]],
                             alpha: float) -> PopularityModel:
        """weight_n = (min_h dis(n, h) + 1) ** -alpha, normalized"""
        if len(catalog) == 0:
            raise ValidationError('Popularity needs a nonempty catalog')
        if alpha <= 0:
            raise ValidationError('Popularity exponent alpha must be positive', alpha=alpha)
        if not hotspots:
            raise ValidationError('At least one hotspot is required')
        centers = np.asarray(hotspots, dtype=float)
        if centers.ndim != 2 or centers.shape[1] != catalog.dimension:
            raise DimensionMismatchError(
                'Hotspots and catalog embeddings differ in dimension',
                dimension=catalog.dimension,
            )
        nearest = cdist(catalog.embeddings, centers).min(axis=1)
        return CatalogService.popularity_from_weights((nearest + 1.0) ** (-alpha))

    @staticmethod
    def zipf_popularity(n_items: int, exponent: float) -> PopularityModel:
        """Rank-ordered Zipf popularity: item n has weight (n + 1) ** -exponent"""
        if n_items < 1:
            raise ValidationError('Popularity needs a nonempty catalog')
        return CatalogService.popularity_from_weights(np.arange(1, n_items + 1, dtype=float) ** (-exponent))

    @staticmethod
    def popularity_from_requests(requests: np.ndarray, n_items: int) -> PopularityModel:
        """Empirical request frequencies of a request log"""
        counts = np.bincount(np.asarray(requests, dtype=np.int64), minlength=n_items)
        if counts.size > n_items:
            raise ValidationError('Request log references ids outside the catalog', n_items=n_items)
        return CatalogService.popularity_from_weights(counts.astype(float))

    # ------------------------------------------------------------------
    # Acceptance probabilities
    # ------------------------------------------------------------------

    @staticmethod
    def acceptance_from_rule(index: NeighborhoodIndex, rule: str,
                             exponent: float = 2.0) -> AcceptanceProbabilities:
        """
        q values aligned with the neighborhood index.

        power: q = dis ** -exponent clipped to [0, 1]; sim_lru: q = 1 within d;
        lru: q = 0 off the diagonal.
        """
        mask = index.mask
        if rule == 'power':
            with np.errstate(divide='ignore', over='ignore'):
                values = np.where(index.distances > 0, index.distances, np.inf) ** (-exponent)
            values = np.where(index.distances > 0, values, 1.0)
            values = np.clip(values, 0.0, 1.0)
        elif rule == 'sim_lru':
            values = np.ones(index.neighbors.shape)
        elif rule == 'lru':
            values = np.zeros(index.neighbors.shape)
        else:
            raise ValidationError(f"Unknown acceptance rule '{rule}'", rule=rule)
        return AcceptanceProbabilities(values=np.where(mask, values, 0.0), rule=rule)

    @staticmethod
    def acceptance_from_table(index: NeighborhoodIndex,
                              table: Iterable[Tuple[int, int, float]]) -> AcceptanceProbabilities:
        """
        q values from explicit (server, requester, q) triples.

        Neighbor pairs missing from the table get q = 0; pairs outside the neighborhood
        relation are ignored.
        """
        lookup = {}
        for server, requester, q in table:
            if not 0.0 <= q <= 1.0:
                raise ValidationError('Acceptance probability outside [0, 1]',
                                      server=server, requester=requester, q=q)
            lookup[(int(server), int(requester))] = float(q)

        values = np.zeros(index.neighbors.shape)
        missing = 0
        for n in range(index.num_items):
            for k, m in enumerate(index.neighbors_of(n)):
                q = lookup.get((int(m), n))
                if q is None:
                    missing += 1
                else:
                    values[n, k] = q
        if missing:
            logger.warning(f"Acceptance table misses {missing} neighbor pairs; using q = 0 for them")
        return AcceptanceProbabilities(values=values, rule='table')

    # ------------------------------------------------------------------
    # Coverage
    # ------------------------------------------------------------------

    @staticmethod
    def neighborhood_masks(index: NeighborhoodIndex, closed: bool) -> List[int]:
        """Bitmask per item of N(n), or of N[n] when closed"""
        masks = []
        for n in range(index.num_items):
            mask = 1 << n if closed else 0
            for m in index.neighbors_of(n):
                mask |= 1 << int(m)
            masks.append(mask)
        return masks

    @staticmethod
    def greedy_max_coverage(index: NeighborhoodIndex, weights: np.ndarray, rounds: int,
                            closed: bool = True) -> Tuple[Tuple[int, ...], float]:
        """
        Greedy weighted max coverage over (open or closed) neighborhoods.

        Each round picks the item whose neighborhood adds the most uncovered weight;
        argmax resolves ties toward the smallest id. Stops early once nothing is gained.
        """
        weights = np.asarray(weights, dtype=float)
        n_items = index.num_items
        members = index.neighbors
        if closed:
            members = np.column_stack([np.arange(n_items), members]) if n_items else members
        valid = members >= 0
        safe = np.where(valid, members, 0)
        uncovered = np.ones(n_items, dtype=bool)
        chosen: List[int] = []
        covered = 0.0
        for _ in range(max(0, int(rounds))):
            gain = np.where(valid, weights[safe] * uncovered[safe], 0.0).sum(axis=1)
            if chosen:
                gain[chosen] = -1.0
            best = int(np.argmax(gain)) if n_items else 0
            if not n_items or gain[best] <= 0:
                break
            chosen.append(best)
            covered += float(gain[best])
            uncovered[safe[best][valid[best]]] = False
        return tuple(chosen), covered

    @staticmethod
    def exact_max_coverage(masks: Sequence[int], weights: np.ndarray, k: int,
                           stop_at: Optional[float] = None) -> Tuple[Tuple[int, ...], float]:
        """
        Branch and bound for max weighted coverage with at most k sets.

        The bound adds the k' largest marginal gains of the remaining sets, which is
        valid because coverage is submodular. Search ends early once `stop_at` is reached.
        """
        weights = np.asarray(weights, dtype=float)
        lookup = _ChunkWeights(weights)
        order = sorted(range(len(masks)), key=lambda i: (-lookup(masks[i]), i))
        ordered = [masks[i] for i in order]
        best_value = -1.0
        best_sets: Tuple[int, ...] = ()

        def search(start: int, chosen: List[int], covered: int, value: float) -> bool:
            nonlocal best_value, best_sets
            if value > best_value:
                best_value = value
                best_sets = tuple(sorted(order[i] for i in chosen))
                if stop_at is not None and best_value >= stop_at:
                    return True
            slots = k - len(chosen)
            if slots <= 0 or start >= len(ordered):
                return False
            gains = [(lookup(ordered[i] & ~covered), i) for i in range(start, len(ordered))]
            top = sorted((g for g, _ in gains), reverse=True)[:slots]
            if value + sum(top) <= best_value:
                return False
            for gain, i in gains:
                if gain <= 0:
                    continue
                if search(i + 1, chosen + [i], covered | ordered[i], value + gain):
                    return True
            return False

        search(0, [], 0, 0.0)
        return best_sets, max(best_value, 0.0)

    @staticmethod
    def check_cover_condition(index: NeighborhoodIndex, capacity: float, mode: str = 'exact',
                              max_items: int = 30, max_capacity: int = 10) -> CoverCheckResult:
        """
        Check that no floor(C) items cover N - C others with their open neighborhoods.

        exact: branch and bound over all size-floor(C) subsets (refused above the budget).
        heuristic: greedy coverage; reaching N - C proves failure, otherwise unknown.
        """
        n_items = index.num_items
        if not 0 < capacity < n_items:
            raise ValidationError('Cover check needs 0 < C < N', capacity=capacity, n_items=n_items)
        subset_size = int(math.floor(capacity))
        required = n_items - capacity

        if mode == 'exact':
            if n_items > max_items or subset_size > max_capacity:
                raise BudgetExceededError(
                    'Exact cover check refused: instance above budget',
                    n_items=n_items, capacity=capacity, max_items=max_items, max_capacity=max_capacity,
                )
            masks = CatalogService.neighborhood_masks(index, closed=False)
            witness, covered = CatalogService.exact_max_coverage(
                masks, np.ones(n_items), subset_size, stop_at=required
            )
            status = CoverStatus.FAILS if covered >= required else CoverStatus.HOLDS
            return CoverCheckResult(status=status, mode=mode, covered=int(round(covered)),
                                    required=required,
                                    witness=witness if status == CoverStatus.FAILS else ())

        if mode == 'heuristic':
            witness, covered = CatalogService.greedy_max_coverage(
                index, np.ones(n_items), subset_size, closed=False
            )
            if covered >= required:
                return CoverCheckResult(status=CoverStatus.FAILS, mode=mode, covered=int(round(covered)),
                                        required=required, witness=witness)
            return CoverCheckResult(status=CoverStatus.UNKNOWN, mode=mode, covered=int(round(covered)),
                                    required=required)

        raise ValidationError(f"Unknown cover check mode '{mode}'", mode=mode)


class _ChunkWeights:
    """Weighted popcount of an item bitmask via per-byte lookup tables"""

    def __init__(self, weights: np.ndarray):
        self.tables = []
        byte_values = np.arange(256)
        for start in range(0, len(weights), 8):
            chunk = weights[start:start + 8]
            bits = (byte_values[:, None] >> np.arange(len(chunk))) & 1
            self.tables.append((bits * chunk).sum(axis=1).tolist())

    def __call__(self, mask: int) -> float:
        total = 0.0
        for table in self.tables:
            total += table[mask & 0xFF]
            mask >>= 8
        return total
