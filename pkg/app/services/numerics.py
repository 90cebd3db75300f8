"""Shared numeric kernels.

K-means (Lloyd with k-means++ seeding), one-dimensional Gaussian-mixture EM,
BFGS quasi-Newton minimization and central finite differences. All kernels
are numpy/scipy only and deterministic for a fixed seed.
"""

import logging
from collections.abc import Callable

import numpy as np
from scipy.special import logsumexp

from app.models.fits import BfgsReport, GmmModel, KMeansResult

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

def _assign(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest center per point (lowest index on ties) and its squared distance."""
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def _seed_centers(
    points: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """k-means++ seeding: each new center drawn with probability ∝ weight·D²."""
    n = points.shape[0]
    first = rng.choice(n, p=weights / weights.sum())
    centers = [points[first]]
    d2 = ((points - points[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        mass = weights * d2
        idx = rng.choice(n, p=mass / mass.sum())
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def _lloyd(
    points: np.ndarray, weights: np.ndarray, centers: np.ndarray, max_iter: int
) -> tuple[np.ndarray, np.ndarray, list[float], int]:
    k, dim = centers.shape
    labels, d2 = _assign(points, centers)
    history = [float(np.dot(weights, d2))]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mass = np.bincount(labels, weights=weights, minlength=k)
        new_centers = centers.copy()
        filled = mass > 0
        for j in range(dim):
            sums = np.bincount(labels, weights=weights * points[:, j], minlength=k)
            new_centers[filled, j] = sums[filled] / mass[filled]
        new_labels, d2 = _assign(points, new_centers)
        centers = new_centers
        history.append(float(np.dot(weights, d2)))
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        if stable:
            break
    return labels, centers, history, iterations


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    n_init: int = 10,
    weights: np.ndarray | None = None,
) -> KMeansResult:
    """Lloyd K-means with k-means++ seeding.

    ``weights`` lets callers cluster unique values with multiplicities instead
    of every raw sample; the objective is then Σ w·‖x − μ‖². The best of
    ``n_init`` seeded restarts is returned.

    Raises:
        ValueError: empty input, k < 1, or fewer distinct points than k.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.shape[0] == 0:
        raise ValueError("empty input")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    if np.unique(pts, axis=0).shape[0] < k:
        raise ValueError("insufficient distinct points")

    w = np.ones(pts.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (pts.shape[0],) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per point")

    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for restart in range(max(1, n_init)):
        centers = _seed_centers(pts, w, k, rng)
        labels, centers, history, iterations = _lloyd(pts, w, centers, max_iter)
        objective = history[-1]
        logger.debug("kmeans restart %d: objective=%.6g after %d iterations",
                     restart, objective, iterations)
        if best is None or objective < best.objective:
            best = KMeansResult(
                assignments=labels,
                centers=centers,
                objective=objective,
                iterations=iterations,
                history=history,
            )
    return best


# ---------------------------------------------------------------------------
# Gaussian mixture EM (1-D)
# ---------------------------------------------------------------------------

def _log_weighted_density(
    x: np.ndarray, means: np.ndarray, variances: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    """log(w_j · N(x | m_j, v_j)) for every sample/mode pair, shape (n, K)."""
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    diff = x[:, None] - means[None, :]
    return (
        log_w[None, :]
        - 0.5 * np.log(2.0 * np.pi * variances)[None, :]
        - diff**2 / (2.0 * variances[None, :])
    )


def gmm_em_1d(
    samples: np.ndarray,
    n_modes: int,
    seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 500,
    var_floor_ratio: float = 1e-6,
) -> GmmModel:
    """Fit a 1-D Gaussian mixture by EM.

    Means start at evenly spaced sample quantiles (evenly spaced over the
    sample range when quantiles coincide), so the fit is fully determined by
    the data; ``seed`` is accepted for interface symmetry with ``kmeans``.
    Variances are floored at ``var_floor_ratio`` times the sample variance.

    All-equal samples return a single mode flagged ``degenerate``.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if n_modes < 1:
        raise ValueError(f"n_modes must be >= 1, got {n_modes}")
    if x.size < 2 * n_modes:
        raise ValueError(f"need at least {2 * n_modes} samples for {n_modes} modes, got {x.size}")
    if tol <= 0:
        raise ValueError("tol must be > 0")

    total_var = float(x.var())
    floor = var_floor_ratio * total_var if total_var > 0 else var_floor_ratio

    if np.ptp(x) == 0:
        logger.debug("gmm_em_1d: all %d samples equal, returning degenerate mode", x.size)
        means = np.array([x[0]])
        variances = np.array([floor])
        weights = np.array([1.0])
        ll = float(logsumexp(_log_weighted_density(x, means, variances, weights), axis=1).sum())
        return GmmModel(n_modes=1, means=means, variances=variances, weights=weights,
                        log_likelihood=ll, degenerate=True, history=[ll])

    K = n_modes
    positions = (np.arange(K) + 0.5) / K
    means = np.quantile(x, positions)
    if K > 1 and np.any(np.diff(means) <= 0):
        means = x.min() + positions * (x.max() - x.min())
    variances = np.full(K, max(total_var, floor))
    weights = np.full(K, 1.0 / K)

    history: list[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        log_p = _log_weighted_density(x, means, variances, weights)
        log_norm = logsumexp(log_p, axis=1)
        ll = float(log_norm.sum())
        if history and ll - history[-1] < tol:
            history.append(ll)
            break
        history.append(ll)

        resp = np.exp(log_p - log_norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / nk.sum()
        active = nk > 0
        new_means = means.copy()
        new_means[active] = (resp[:, active] * x[:, None]).sum(axis=0) / nk[active]
        means = new_means
        spread = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0)
        new_vars = variances.copy()
        new_vars[active] = spread[active] / nk[active]
        variances = np.maximum(new_vars, floor)
    else:
        # The last M-step has not been scored yet.
        ll = float(logsumexp(_log_weighted_density(x, means, variances, weights), axis=1).sum())
        history.append(ll)
        logger.debug("gmm_em_1d: max_iter=%d reached", max_iter)

    order = np.argsort(means, kind="stable")
    return GmmModel(
        n_modes=K,
        means=means[order],
        variances=variances[order],
        weights=weights[order],
        log_likelihood=history[-1],
        degenerate=False,
        iterations=iterations,
        history=history,
    )


def gmm_assign(samples: np.ndarray, model: GmmModel) -> np.ndarray:
    """Hard assignment to the mode of maximum posterior (lower index on ties)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    log_p = _log_weighted_density(x, model.means, model.variances, model.weights)
    return np.argmax(log_p, axis=1)


# ---------------------------------------------------------------------------
# BFGS
# ---------------------------------------------------------------------------

def _evaluate(objective: Objective, x: np.ndarray) -> tuple[float, np.ndarray]:
    f, g = objective(x)
    return float(f), np.asarray(g, dtype=np.float64).ravel()


def _finite(f: float, g: np.ndarray) -> bool:
    return bool(np.isfinite(f) and np.all(np.isfinite(g)))


def _line_search(
    objective: Objective,
    x: np.ndarray,
    f: float,
    p: np.ndarray,
    slope: float,
    c1: float,
    shrink: float,
    max_backtracks: int,
) -> tuple[float, float, np.ndarray] | None:
    """Armijo backtracking: step 1, then ``shrink`` times the last step.

    Accepts the first step with f(x + t·p) <= f + c1·t·slope and finite
    value and gradient. Returns (step, f_new, g_new), or None when
    ``max_backtracks`` shrinks find no such step.
    """
    step = 1.0
    for _ in range(max_backtracks + 1):
        f_new, g_new = _evaluate(objective, x + step * p)
        if _finite(f_new, g_new) and f_new <= f + c1 * step * slope:
            return step, f_new, g_new
        step *= shrink
    return None


def bfgs_minimize(
    objective: Objective,
    x0: np.ndarray,
    grad_tol: float = 1e-8,
    max_iter: int = 200,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 60,
) -> BfgsReport:
    """Minimize a smooth function with BFGS and Armijo backtracking.

    ``objective(x)`` returns (value, gradient). The inverse-Hessian estimate is
    reset to the identity whenever the curvature condition sᵀy > 0 fails or
    the search direction stops being a descent direction.

    Raises:
        ValueError: "non-finite objective" when f or ∇f at x0 is not finite.
    """
    if grad_tol <= 0:
        raise ValueError("grad_tol must be > 0")
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    f, g = _evaluate(objective, x)
    if not _finite(f, g):
        raise ValueError("non-finite objective")

    n = x.size
    eye = np.eye(n)
    H = eye.copy()
    fresh = True
    history = [f]
    iterations = 0

    while iterations < max_iter:
        if np.linalg.norm(g) <= grad_tol:
            break
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0:
            H, fresh = eye.copy(), True
            p = -g
            slope = float(-(g @ g))

        result = _line_search(objective, x, f, p, slope, c1, shrink, max_backtracks)
        iterations += 1
        if result is None:
            if fresh:
                logger.debug("bfgs: line search failed on steepest descent at iter %d", iterations)
                break
            H, fresh = eye.copy(), True
            continue

        step, f_new, g_new = result
        s = step * p
        y = g_new - g
        sy = float(s @ y)
        x = x + s
        f, g = f_new, g_new
        history.append(f)

        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y) and sy > 0:
            if fresh:
                H = (sy / float(y @ y)) * eye
            rho = 1.0 / sy
            V = eye - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
            fresh = False
        else:
            logger.debug("bfgs: curvature condition failed at iter %d, resetting", iterations)
            H, fresh = eye.copy(), True

    grad_norm = float(np.linalg.norm(g))
    converged = grad_norm <= grad_tol
    if not converged:
        logger.debug("bfgs: stopped after %d iterations with |g|=%.3g", iterations, grad_norm)
    return BfgsReport(
        x_star=x,
        f_star=f,
        grad_norm=grad_norm,
        iterations=iterations,
        converged=converged,
        history=history,
    )


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def _scalar(value) -> float:
    if isinstance(value, tuple):
        value = value[0]
    return float(value)


def finite_diff_grad(objective: Callable, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate.

    ``objective`` may return a scalar or a (value, gradient) tuple.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (_scalar(objective(plus.reshape(x.shape)))
                   - _scalar(objective(minus.reshape(x.shape)))) / (2.0 * h)
    return grad.reshape(x.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a − n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
