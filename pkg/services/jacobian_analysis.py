"""
Jacobians of the occupancy map, operator norms and damping selection
"""
import logging
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from models import BetaInterval, BetaTuning, JacobianBundle, NeighborhoodIndex, OperatorNorms
from services.exceptions import LabError, PowerIterationError, SingularJacobianError, ValidationError
from services.rnd_ttl_model import (
    Acceptance, acceptance_values, characteristic_time, insertion_rates, neighbor_products,
    occupancy_g_partials, refresh_rates,
)

logger = logging.getLogger(__name__)

DENSE_LIMIT = 2000
NORM_BLOCK = 256
FALLBACK_BETA = 0.5

Matrix = Union[np.ndarray, sparse.spmatrix, LinearOperator]


# ---------------------------------------------------------------------------
# Rate Jacobians
# ---------------------------------------------------------------------------

def jacobian_e(index: NeighborhoodIndex, acceptance: Acceptance, rates, occupancy) -> sparse.csr_matrix:
    """
    dE_n / do_j for E = lambda * p^i.

    For the neighbor at position l of row n:
    dp_n/do_l = P_l (c_l - Q_l - W_l), with c = 1 - q, P the exclusive prefix
    products, Q_l the product after l and W_l = c_{l+1} o_{l+1} + (1 - o_{l+1}) W_{l+1}.
    """
    q = acceptance_values(index, acceptance)
    o = np.asarray(occupancy, dtype=float)
    lam = np.asarray(rates, dtype=float)
    n_items, width = index.neighbors.shape
    _, occ, prefix, _ = neighbor_products(index, o)
    keep = 1.0 - q

    suffix = np.ones((n_items, width))
    tail = np.zeros((n_items, width))
    for l in range(width - 2, -1, -1):
        suffix[:, l] = suffix[:, l + 1] * (1.0 - occ[:, l + 1])
        tail[:, l] = keep[:, l + 1] * occ[:, l + 1] + (1.0 - occ[:, l + 1]) * tail[:, l + 1]

    values = lam[:, None] * prefix * (keep - suffix - tail)
    rows, cols = np.nonzero(index.mask)
    return sparse.csr_matrix(
        (values[rows, cols], (rows, index.neighbors[rows, cols])), shape=(n_items, n_items)
    )


def jacobian_r(index: NeighborhoodIndex, acceptance: Acceptance, rates, occupancy) -> sparse.csr_matrix:
    """
    dR_n / do_j.

    Each neighbor m of n (n at position r of m's row) contributes
    q_n(m) lambda_m (1 - o_m) P[m, r]; its derivative in o_m is -q lambda_m P[m, r]
    and in the item at position l < r of m's row is
    -q lambda_m (1 - o_m) P[m, l] prod_{l<j<r} (1 - o_{m,j}).
    """
    q = acceptance_values(index, acceptance)
    o = np.asarray(occupancy, dtype=float)
    lam = np.asarray(rates, dtype=float)
    n_items = index.num_items
    _, occ, prefix, _ = neighbor_products(index, o)

    src, slot = np.nonzero(index.mask)
    server = index.neighbors[src, slot]
    pos = index.reverse[src, slot]
    weight = q[server, pos] * lam[server]

    rows = [src]
    cols = [server]
    vals = [-weight * prefix[server, pos]]

    coef = weight * (1.0 - o[server])
    between = np.ones(src.shape[0])
    for offset in range(1, index.max_degree + 1):
        l = pos - offset
        live = l >= 0
        if not np.any(live):
            break
        l_live = l[live]
        s_live = server[live]
        rows.append(src[live])
        cols.append(index.neighbors[s_live, l_live])
        vals.append(-coef[live] * prefix[s_live, l_live] * between[live])
        between[live] *= 1.0 - occ[s_live, l_live]

    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_items, n_items)
    ).tocsr()


def jacobian_g(index: NeighborhoodIndex, acceptance: Acceptance, rates, capacity: float, occupancy,
               tc_tol: float = 1e-10) -> JacobianBundle:
    """Assemble the pieces of J_G at o; the timer term is the rank-one correction"""
    o = np.asarray(occupancy, dtype=float)
    refresh = refresh_rates(index, acceptance, rates, o)
    insertion = insertion_rates(index, acceptance, rates, o)
    t_c = characteristic_time(refresh, insertion, capacity, tc_tol)
    dg1, dg2, dg3 = (np.atleast_1d(d) for d in occupancy_g_partials(refresh, insertion, t_c))
    if not dg3.sum() > 0:
        raise SingularJacobianError('Timer partials sum to zero; t_C gradient undefined')
    return JacobianBundle(
        jac_e=jacobian_e(index, acceptance, rates, o),
        jac_r=jacobian_r(index, acceptance, rates, o),
        dg1=dg1, dg2=dg2, dg3=dg3, t_c=t_c,
    )


def jacobian_operator(bundle: JacobianBundle, beta: Optional[float] = None) -> LinearOperator:
    """Matrix-free J_G, or J_G_beta when beta is given"""
    w = bundle.coupling_row
    dg3 = bundle.dg3
    total = dg3.sum()
    scale = 1.0 if beta is None else 1.0 - beta
    shift = 0.0 if beta is None else beta

    def matmat(x):
        x = np.asarray(x, dtype=float).reshape(bundle.size, -1)
        local = bundle.dg1[:, None] * (bundle.jac_r @ x) + bundle.dg2[:, None] * (bundle.jac_e @ x)
        return scale * (local - np.outer(dg3, w @ x) / total) + shift * x

    def rmatmat(x):
        x = np.asarray(x, dtype=float).reshape(bundle.size, -1)
        local = bundle.jac_r.T @ (bundle.dg1[:, None] * x) + bundle.jac_e.T @ (bundle.dg2[:, None] * x)
        return scale * (local - np.outer(w, dg3 @ x) / total) + shift * x

    return LinearOperator(
        shape=(bundle.size, bundle.size), dtype=float,
        matvec=lambda v: matmat(v).ravel(), rmatvec=lambda v: rmatmat(v).ravel(),
        matmat=matmat, rmatmat=rmatmat,
    )


def jacobian_matrix(bundle: JacobianBundle, beta: Optional[float] = None) -> Matrix:
    """Dense J_G(_beta) for small catalogs, an operator otherwise"""
    if bundle.size <= DENSE_LIMIT:
        return bundle.jacobian_g() if beta is None else bundle.jacobian_g_beta(beta)
    return jacobian_operator(bundle, beta)


def finite_difference_jacobian(func: Callable[[np.ndarray], np.ndarray], point, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector map"""
    point = np.asarray(point, dtype=float)
    columns = []
    for j in range(point.shape[0]):
        bump = np.zeros_like(point)
        bump[j] = step
        columns.append((np.asarray(func(point + bump)) - np.asarray(func(point - bump))) / (2 * step))
    return np.column_stack(columns)


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def _operator(matrix: Matrix) -> LinearOperator:
    if isinstance(matrix, LinearOperator):
        return matrix
    return aslinearoperator(matrix)


def power_iteration(matvec: Callable[[np.ndarray], np.ndarray], size: int, tol: float = 1e-10,
                    max_iterations: int = 20000, restarts: int = 3, seed: int = 0) -> float:
    """
    Dominant eigenvalue of a symmetric positive semidefinite operator.

    Stops when ||A v - mu v|| <= tol * mu for the Rayleigh quotient mu. Each restart
    draws a fresh random start; exhausting them raises with the last estimate.
    """
    rng = np.random.default_rng(seed)
    estimate = 0.0
    for attempt in range(restarts):
        v = rng.standard_normal(size)
        v /= np.linalg.norm(v)
        for _ in range(max_iterations):
            av = matvec(v)
            estimate = float(v @ av)
            norm_av = float(np.linalg.norm(av))
            if norm_av == 0.0:
                return 0.0
            if np.linalg.norm(av - estimate * v) <= tol * abs(estimate):
                return estimate
            v = av / norm_av
        logger.warning(f"Power iteration restart {attempt + 1}/{restarts}: estimate {estimate:.12g}")
    raise PowerIterationError('Power iteration did not converge', last_estimate=estimate)


def spectral_norm(matrix: Matrix, tol: float = 1e-10, seed: int = 0) -> float:
    """sqrt of the largest eigenvalue of M^T M"""
    op = _operator(matrix)
    if op.shape[0] == 0:
        return 0.0
    value = power_iteration(lambda v: op.rmatvec(op.matvec(v)), op.shape[1], tol=tol, seed=seed)
    return float(np.sqrt(max(value, 0.0)))


def _block_abs_sums(apply: Callable[[np.ndarray], np.ndarray], size: int) -> np.ndarray:
    sums = np.empty(size)
    for start in range(0, size, NORM_BLOCK):
        stop = min(start + NORM_BLOCK, size)
        block = np.zeros((size, stop - start))
        block[np.arange(start, stop), np.arange(stop - start)] = 1.0
        sums[start:stop] = np.abs(apply(block)).sum(axis=0)
    return sums


def operator_norms(matrix: Matrix, tol: float = 1e-10, seed: int = 0) -> OperatorNorms:
    """Spectral, 1 (max column sum) and infinity (max row sum) norms of a square matrix"""
    if isinstance(matrix, LinearOperator):
        size = matrix.shape[0]
        one = _block_abs_sums(matrix.matmat, size).max(initial=0.0)
        infinity = _block_abs_sums(matrix.rmatmat, size).max(initial=0.0)
    else:
        dense = matrix.toarray() if sparse.issparse(matrix) else np.asarray(matrix, dtype=float)
        if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
            raise ValidationError('Operator norms need a square matrix', shape=list(dense.shape))
        absolute = np.abs(dense)
        one = absolute.sum(axis=0).max(initial=0.0)
        infinity = absolute.sum(axis=1).max(initial=0.0)
    return OperatorNorms(spectral=spectral_norm(matrix, tol, seed), one=float(one), infinity=float(infinity))


# ---------------------------------------------------------------------------
# Damping interval
# ---------------------------------------------------------------------------

def beta_interval_from_constants(gamma: float, eta: float, spectral: float = float('nan')) -> BetaInterval:
    discriminant = eta ** 2 - 4 * eta * gamma + 4
    if discriminant < 0:
        return BetaInterval(gamma=gamma, eta=eta, discriminant=discriminant,
                            lower=float('nan'), upper=float('nan'), spectral_norm=spectral)
    root = np.sqrt(discriminant)
    lower = max(0.0, (2 * gamma - eta - root) / (2 * (gamma + 1)))
    upper = min(1.0, (2 * gamma - eta + root) / (2 * (gamma + 1)))
    return BetaInterval(gamma=gamma, eta=eta, discriminant=discriminant,
                        lower=float(lower), upper=float(upper), spectral_norm=spectral)


def beta_interval(jacobian: Matrix, tol: float = 1e-10, seed: int = 0) -> BetaInterval:
    """
    Interval of damping values that provably make ||J_G_beta||_2 < 1 at this point.

    eta is the spectral radius of the symmetric J + J^T, equal to its spectral norm.
    gamma is the squared spectral norm ||J||_2^2. An antisymmetric J (eta = 0) gives
    ((gamma - 1) / (gamma + 1), 1): constants gamma = 3 yield (0.5, 1), while a matrix
    with ||J||_2 = 3 has gamma = 9 and yields (0.8, 1).
    """
    op = _operator(jacobian)
    symmetric = op + op.H
    norm = spectral_norm(op, tol, seed)
    eta = spectral_norm(symmetric, tol, seed)
    return beta_interval_from_constants(norm ** 2, eta, norm)


def quadratic_bound(gamma: float, eta: float, beta: float) -> float:
    """Upper bound on ||J_G_beta||_2^2 as a function of beta"""
    return (1 + gamma) * beta ** 2 - (2 * gamma - eta) * beta + gamma


def sample_capped_simplex(n_items: int, capacity: float, count: int, seed: int = 0) -> List[np.ndarray]:
    """
    Random points of {o in [0,1]^N : sum o = C}.

    Dirichlet(1) scaled to C, then coordinates above 1 are clipped and their excess
    spread over the uncapped ones in proportion to their values, until feasible.
    """
    if not 0 < capacity < n_items:
        raise ValidationError('Capped simplex sampling needs 0 < C < N', capacity=capacity, n_items=n_items)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        o = rng.dirichlet(np.ones(n_items)) * capacity
        capped = np.zeros(n_items, dtype=bool)
        for _ in range(n_items + 1):
            over = o > 1.0
            if not np.any(over):
                break
            excess = float((o[over] - 1.0).sum())
            o[over] = 1.0
            capped |= over
            free = ~capped
            mass = o[free].sum()
            if mass > 0:
                o[free] += excess * o[free] / mass
            else:
                o[free] += excess / free.sum()
        o = np.clip(o, 0.0, 1.0)
        drift = capacity - o.sum()
        free = o < 1.0
        o[free] += drift / free.sum()
        samples.append(o)
    return samples


def tune_beta(index: NeighborhoodIndex, acceptance: Acceptance, rates, capacity: float,
              samples: int = 8, seed: int = 0, tc_tol: float = 1e-10,
              points: Optional[Sequence[np.ndarray]] = None) -> BetaTuning:
    """
    Pick beta from the intersection of the per-sample damping intervals.

    The midpoint is kept only when every sample has a nonempty interval and
    ||J_G_beta||_2 < 1 holds at every sample; otherwise 0.5 is returned unverified.
    """
    if samples < 1 and points is None:
        raise ValidationError('tune_beta needs at least one sample', samples=samples)
    points = list(points) if points is not None else sample_capped_simplex(
        index.num_items, capacity, samples, seed)

    intervals: List[BetaInterval] = []
    bundles: List[JacobianBundle] = []
    skipped = 0
    for j, o in enumerate(points):
        try:
            bundle = jacobian_g(index, acceptance, rates, capacity, o, tc_tol)
            interval = beta_interval(jacobian_matrix(bundle), seed=seed + j)
        except LabError as exc:
            skipped += 1
            logger.warning(f"Skipping damping sample {j}: {exc.message}")
            continue
        intervals.append(interval)
        bundles.append(bundle)

    def fallback(reason: str, intersection=None) -> BetaTuning:
        logger.warning(f"Damping tuning fell back to beta={FALLBACK_BETA}: {reason}")
        return BetaTuning(beta=FALLBACK_BETA, verified=False, intervals=intervals,
                          intersection=intersection, skipped=skipped, reason=reason)

    if not intervals:
        return fallback('no usable samples')
    if any(i.discriminant < 0 for i in intervals):
        return fallback('negative discriminant at some sample')
    lower = max(i.lower for i in intervals)
    upper = min(i.upper for i in intervals)
    if not lower < upper:
        return fallback('empty intersection', (lower, upper))

    beta = 0.5 * (lower + upper)
    for j, bundle in enumerate(bundles):
        try:
            norm = spectral_norm(jacobian_matrix(bundle, beta), seed=seed + j)
        except LabError as exc:
            return fallback(f"post-hoc check failed: {exc.message}", (lower, upper))
        if not norm < 1.0:
            return fallback(f"post-hoc check failed: ||J_G_beta||_2={norm:.6g}", (lower, upper))
    logger.info(f"Damping tuned to beta={beta:.6f} from {len(intervals)} samples")
    return BetaTuning(beta=beta, verified=True, intervals=intervals,
                      intersection=(lower, upper), skipped=skipped)
