"""Weighted intrinsic (Karcher) mean by Riemannian gradient descent."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from config.config import (
    MEAN_LEARNING_RATE,
    MEAN_MAX_ITERS,
    MEAN_TOLERANCE,
    THREADS,
    WEIGHT_SUM_TOL,
)
from src.errors import ConfigError, DegenerateInput
from src.manifold import (
    ClosenessReport,
    Geometry,
    GeometryKind,
    ManifoldPoint,
    PointsLike,
    as_point_matrix,
    closeness_report,
)

logger = logging.getLogger(__name__)

# Rows per partial sum of the tangent mean
CHUNK_ROWS = 8192

WeightsLike = Union[None, str, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class MeanConfig:
    """Step size, stopping tolerance and iteration cap of the mean iteration."""

    learning_rate: float = MEAN_LEARNING_RATE
    tolerance: float = MEAN_TOLERANCE
    max_iters: int = MEAN_MAX_ITERS
    subsample: Optional[int] = None
    seed: int = 0
    record_trace: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", {"learning_rate": self.learning_rate})
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive", {"tolerance": self.tolerance})
        if int(self.max_iters) < 1:
            raise ConfigError("max_iters must be at least 1", {"max_iters": self.max_iters})
        if self.subsample is not None and int(self.subsample) < 1:
            raise ConfigError("subsample must be at least 1", {"subsample": self.subsample})


@dataclass(frozen=True, eq=False)
class MeanResult:
    mean: ManifoldPoint
    iterations: int
    final_step_norm: float
    converged: bool
    closeness: Optional[ClosenessReport] = None
    warnings: tuple = ()
    objective_trace: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.coords.tolist(),
            "iterations": self.iterations,
            "final_step_norm": self.final_step_norm,
            "converged": self.converged,
            "closeness": self.closeness.to_dict() if self.closeness else None,
            "warnings": list(self.warnings),
        }


def normalize_weights(weights: WeightsLike, n: int) -> np.ndarray:
    """Validate weights on the probability simplex; 'uniform' or None gives 1/n each."""
    if weights is None or (isinstance(weights, str) and weights == "uniform"):
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ConfigError(f"got {w.shape[0]} weights for {n} points", {"weights": int(w.shape[0]), "points": n})
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ConfigError("weights must be finite and nonnegative")
    total = float(np.sum(w))
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ConfigError(f"weights sum to {total:.9g}, expected 1", {"sum": total})
    return w / total


def tangent_mean(g: Geometry, mu: np.ndarray, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of log maps at mu (the negative Riemannian gradient)."""
    n = points.shape[0]
    if n <= CHUNK_ROWS or THREADS == 1:
        return weights @ g.log(mu, points)

    def partial(start: int) -> np.ndarray:
        stop = start + CHUNK_ROWS
        return weights[start:stop] @ g.log(mu, points[start:stop])

    with ThreadPoolExecutor(max_workers=THREADS) as pool:
        parts = list(pool.map(partial, range(0, n, CHUNK_ROWS)))
    # fixed summation order regardless of scheduling
    total = np.zeros_like(mu)
    for part in parts:
        total = total + part
    return total


def mean_objective(g: Geometry, mu: np.ndarray, points: np.ndarray, weights: np.ndarray) -> float:
    """Half the weighted sum of squared distances to mu."""
    return 0.5 * float(weights @ g.dist(points, mu) ** 2)


def _init_guess(g: Geometry, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    m = weights @ points
    if g.kind is GeometryKind.SPHERE:
        norm = np.linalg.norm(m)
        if norm < 1e-12:
            raise DegenerateInput("weighted arithmetic mean vanishes on the sphere", {"norm": float(norm)})
        return m / norm
    if g.kind is GeometryKind.LORENTZ:
        return g.project(m)
    return m


def init_guess(points: PointsLike, weights: WeightsLike = None, geometry: Optional[Geometry] = None) -> ManifoldPoint:
    """Normalized weighted arithmetic mean, the starting iterate."""
    g, matrix = as_point_matrix(points, geometry)
    w = normalize_weights(weights, matrix.shape[0])
    return ManifoldPoint(_init_guess(g, matrix, w), g)


def intrinsic_mean(
    points: PointsLike,
    weights: WeightsLike = None,
    cfg: Optional[MeanConfig] = None,
    geometry: Optional[Geometry] = None,
) -> MeanResult:
    """
    Weighted intrinsic mean by the iteration mu <- Exp_mu(eta * sum_i w_i Log_mu(u_i)).
    Stops once the step norm drops below the tolerance; hitting max_iters returns
    converged=False instead of raising.
    """
    cfg = cfg or MeanConfig()
    g, matrix = as_point_matrix(points, geometry)
    w = normalize_weights(weights, matrix.shape[0])

    if cfg.subsample is not None and matrix.shape[0] > cfg.subsample:
        rng = np.random.default_rng(cfg.seed)
        idx = np.sort(rng.choice(matrix.shape[0], size=int(cfg.subsample), replace=False))
        matrix, w = matrix[idx], w[idx]
        if w.sum() <= 0:
            raise DegenerateInput("subsample carries no weight")
        w = w / w.sum()
        logger.info("Estimating the mean from %d of the input points", len(idx))

    mu = _init_guess(g, matrix, w)
    warnings = []
    closeness = closeness_report(matrix, ManifoldPoint(mu, g))
    if not closeness.within_half_pi:
        msg = (
            f"points reach {closeness.max:.4f} from the initial guess; "
            "the intrinsic mean may not be unique"
        )
        logger.warning(msg)
        warnings.append(msg)

    trace = [mean_objective(g, mu, matrix, w)] if cfg.record_trace else []
    step_norm = float("inf")
    converged = False
    iterations = 0
    for iterations in range(1, int(cfg.max_iters) + 1):
        delta = cfg.learning_rate * tangent_mean(g, mu, matrix, w)
        step_norm = float(g.norm(delta))
        mu = g.exp(mu, delta)
        if cfg.record_trace:
            trace.append(mean_objective(g, mu, matrix, w))
        if step_norm < cfg.tolerance:
            converged = True
            break

    if converged:
        logger.debug("Intrinsic mean converged in %d iteration(s), step %.3e", iterations, step_norm)
    else:
        msg = f"intrinsic mean did not converge in {iterations} iterations (step {step_norm:.3e})"
        logger.warning(msg)
        warnings.append(msg)

    return MeanResult(
        mean=ManifoldPoint(mu, g),
        iterations=iterations,
        final_step_norm=step_norm,
        converged=converged,
        closeness=closeness,
        warnings=tuple(warnings),
        objective_trace=tuple(trace),
    )
