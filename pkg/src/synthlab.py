"""
Synthetic ground truth for decompositions.
Generates exactly decomposable sets, adds tangent-Gaussian noise, drops tuples
while keeping every primitive covered, and minimizes the tangent objective by
plain gradient descent as an independent check of the closed form.
"""
import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from config.config import ORACLE_ITERS, ORACLE_STEP, SPARSIFY_MAX_RETRIES
from src.decompose import (
    CompositionSpace,
    Decomposition,
    LabeledEmbeddingSet,
    tuple_probabilities,
)
from src.errors import ConfigError, OracleDivergence
from src.karcher import MeanConfig, intrinsic_mean
from src.manifold import Geometry, GeometryKind, ManifoldPoint

logger = logging.getLogger(__name__)

# Consecutive objective increases tolerated by the oracle
DIVERGENCE_PATIENCE = 10
ORACLE_STOP = 1e-14


@dataclass(frozen=True)
class SynthSpec:
    space: CompositionSpace
    geometry: Geometry
    direction_scale: float = 0.3
    noise_sigma: float = 0.0
    samples_per_tuple: int = 1
    keep_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.direction_scale > 0:
            raise ConfigError("direction_scale must be positive", {"direction_scale": self.direction_scale})
        if self.geometry.kind is GeometryKind.SPHERE and self.direction_scale * self.space.n_factors >= np.pi / 2:
            raise ConfigError(
                "direction_scale times the number of factors must stay below pi/2 on the sphere",
                {"direction_scale": self.direction_scale, "factors": self.space.n_factors},
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative", {"noise_sigma": self.noise_sigma})
        if int(self.samples_per_tuple) < 1:
            raise ConfigError("samples_per_tuple must be at least 1", {"samples_per_tuple": self.samples_per_tuple})
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError("keep_fraction must lie in (0, 1]", {"keep_fraction": self.keep_fraction})

    @property
    def ambient_dim(self) -> int:
        return self.geometry.ambient_dim

    @classmethod
    def from_dict(cls, data: Mapping) -> "SynthSpec":
        try:
            space = CompositionSpace.from_dict(data)
            geometry = Geometry(data.get("geometry", "sphere"), int(data["dim"]), float(data.get("curvature", 1.0)))
            return cls(
                space=space,
                geometry=geometry,
                direction_scale=float(data.get("direction_scale", 0.3)),
                noise_sigma=float(data.get("noise_sigma", 0.0)),
                samples_per_tuple=int(data.get("samples_per_tuple", 1)),
                keep_fraction=float(data.get("keep_fraction", 1.0)),
                seed=int(data.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"malformed synthetic spec: {e}")

    def to_dict(self) -> dict:
        return {
            **self.space.to_dict(),
            "geometry": self.geometry.kind.value,
            "dim": self.ambient_dim,
            "curvature": self.geometry.curvature,
            "direction_scale": self.direction_scale,
            "noise_sigma": self.noise_sigma,
            "samples_per_tuple": int(self.samples_per_tuple),
            "keep_fraction": self.keep_fraction,
            "seed": int(self.seed),
        }


def _random_base(g: Geometry, rng: np.random.Generator) -> np.ndarray:
    if g.kind is GeometryKind.SPHERE:
        return g.project(rng.normal(size=g.ambient_dim))
    if g.kind is GeometryKind.LORENTZ:
        return g.project(0.5 * rng.normal(size=g.ambient_dim))
    return rng.normal(size=g.ambient_dim)


def _all_codes(space: CompositionSpace) -> np.ndarray:
    return space.tuple_codes(np.arange(space.size))


def gen_decomposable(spec: SynthSpec) -> tuple[LabeledEmbeddingSet, Decomposition]:
    """One row per tuple, exactly Exp_mu of the summed centered directions."""
    g, space = spec.geometry, spec.space
    rng = np.random.default_rng(spec.seed)
    mu = _random_base(g, rng)

    blocks = []
    for size in space.sizes:
        raw = g.to_tangent(mu, rng.normal(size=(size, g.coord_dim)))
        centered = raw - raw.mean(axis=0)
        longest = float(np.max(g.norm(centered)))
        blocks.append(centered * (spec.direction_scale / longest) if longest > 0 else centered)
    directions = np.vstack(blocks)
    codes = _all_codes(space)
    tangents = sum(block[codes[:, i]] for i, block in enumerate(blocks))

    truth = Decomposition(
        mu=ManifoldPoint(mu, g),
        directions=directions,
        space=space,
        seen_ids=tuple(range(space.size)),
        denoised=tangents,
        diagnostics={"source": "synthetic", "spec": spec.to_dict()},
    )
    rows = g.exp(mu[None, :], tangents)
    ids = [space.label(space.decode(c)) for c in codes]
    return LabeledEmbeddingSet(g, rows, codes, tuple(ids), space), truth


def add_noise(data: LabeledEmbeddingSet, sigma: float, k: int, seed: int = 0) -> LabeledEmbeddingSet:
    """k samples Exp_u(eta) per row, eta an isotropic tangent Gaussian with std sigma."""
    if sigma < 0:
        raise ConfigError("sigma must be nonnegative", {"sigma": sigma})
    if int(k) < 1:
        raise ConfigError("k must be at least 1", {"k": k})
    g = data.geometry
    rng = np.random.default_rng(seed)
    base = np.repeat(data.rows, k, axis=0)
    eta = g.to_tangent(base, sigma * rng.normal(size=base.shape))
    rows = g.exp(base, eta)
    ids = tuple(f"{sid}#{e}" for sid in data.sample_ids for e in range(k))
    return LabeledEmbeddingSet(g, rows, np.repeat(data.codes, k, axis=0), ids, data.space)


def sparsify(data: LabeledEmbeddingSet, keep_fraction: float, seed: int = 0) -> LabeledEmbeddingSet:
    """
    Drop whole tuples at random, keeping round(keep_fraction * tuples) of them.
    Draws are retried with successive seeds until every primitive stays covered.
    """
    if not 0 < keep_fraction <= 1:
        raise ConfigError("keep_fraction must lie in (0, 1]", {"keep_fraction": keep_fraction})
    seen = data.seen_ids()
    target = max(1, int(round(keep_fraction * seen.size)))
    if target >= seen.size:
        return data

    seen_codes = data.space.tuple_codes(seen)
    required = [np.unique(seen_codes[:, i]) for i in range(data.space.n_factors)]
    widest = max(r.size for r in required)
    if target < widest:
        raise ConfigError(
            f"keeping {target} tuple(s) cannot cover a factor with {widest} primitives",
            {"target": target, "widest_factor": widest},
        )

    for attempt in range(SPARSIFY_MAX_RETRIES):
        rng = np.random.default_rng(seed + attempt)
        chosen = np.sort(rng.choice(seen.size, size=target, replace=False))
        codes = seen_codes[chosen]
        if all(np.array_equal(np.unique(codes[:, i]), r) for i, r in enumerate(required)):
            if attempt:
                logger.debug("Sparsification kept coverage after %d retries", attempt)
            return data.subset(np.isin(data.tuple_ids, seen[chosen]))
    raise ConfigError(
        f"no coverage-preserving subset of {target} tuples found in {SPARSIFY_MAX_RETRIES} draws",
        {"target": target, "keep_fraction": keep_fraction},
    )


def generate(spec: SynthSpec) -> tuple[LabeledEmbeddingSet, Decomposition]:
    """Decomposable set, then the noise and sparsification a SynthSpec asks for."""
    data, truth = gen_decomposable(spec)
    if spec.noise_sigma > 0 or spec.samples_per_tuple > 1:
        data = add_noise(data, spec.noise_sigma, spec.samples_per_tuple, spec.seed + 1)
    if spec.keep_fraction < 1:
        data = sparsify(data, spec.keep_fraction, spec.seed + 2)
    return data, truth


# =============================================================================
# Oracle
# =============================================================================
def oracle_decompose(
    data: LabeledEmbeddingSet,
    noise=None,
    iters: int = ORACLE_ITERS,
    step: float = ORACLE_STEP,
    cfg: Optional[MeanConfig] = None,
) -> Decomposition:
    """
    Minimize sum_r p_r ||Log_mu(u_r) - sum_i v_{z_i}||^2 over all directions at once.
    Gradient steps are scaled by each primitive's tuple mass, and every factor is
    re-centered after each step.
    """
    g, space = data.geometry, data.space
    probs = tuple_probabilities(data, noise)
    mean = intrinsic_mean(data.rows, probs / probs.sum(), cfg, geometry=g)
    mu = mean.mean.coords
    logs = g.log(mu, data.rows)

    mass = [np.bincount(data.codes[:, i], weights=probs, minlength=n) for i, n in enumerate(space.sizes)]
    blocks = [np.zeros((n, logs.shape[1])) for n in space.sizes]

    def fitted() -> np.ndarray:
        return sum(blocks[i][data.codes[:, i]] for i in range(space.n_factors))

    def objective(resid: np.ndarray) -> float:
        return float(probs @ np.sum(resid * resid, axis=1))

    resid = logs - fitted()
    current = objective(resid)
    increases = 0
    iteration = 0
    for iteration in range(1, int(iters) + 1):
        weighted = probs[:, None] * resid
        largest = 0.0
        for i in range(space.n_factors):
            pull = np.zeros_like(blocks[i])
            np.add.at(pull, data.codes[:, i], weighted)
            update = step * pull / np.where(mass[i] > 0, mass[i], 1.0)[:, None]
            blocks[i] = blocks[i] + update
            blocks[i] = blocks[i] - blocks[i].mean(axis=0)
            largest = max(largest, float(np.max(np.abs(update))))
        resid = logs - fitted()
        value = objective(resid)
        increases = increases + 1 if value > current + 1e-15 * max(1.0, current) else 0
        if increases >= DIVERGENCE_PATIENCE:
            raise OracleDivergence(
                f"objective increased for {DIVERGENCE_PATIENCE} consecutive steps",
                {"iteration": iteration, "objective": value},
            )
        current = value
        if largest < ORACLE_STOP:
            break

    logger.debug("Oracle stopped after %d iterations at objective %.3e", iteration, current)
    return Decomposition(
        mu=mean.mean,
        directions=g.to_tangent(mu, np.vstack(blocks)),
        space=space,
        seen_ids=tuple(data.seen_ids().tolist()),
        diagnostics={"oracle": {"iterations": iteration, "objective": current}},
    )


def direction_errors(estimate: Decomposition, truth: Decomposition) -> dict:
    """Mean direction distance and largest angle to the true directions (zero directions skipped for angles)."""
    diff = np.linalg.norm(estimate.directions - truth.directions, axis=1)
    est_norm = np.linalg.norm(estimate.directions, axis=1)
    true_norm = np.linalg.norm(truth.directions, axis=1)
    valid = (est_norm > 0) & (true_norm > 0)
    cos = np.sum(estimate.directions[valid] * truth.directions[valid], axis=1) / (est_norm[valid] * true_norm[valid])
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    return {
        "mean_error": float(diff.mean()),
        "max_error": float(diff.max()),
        "max_angle": float(angles.max()) if angles.size else 0.0,
    }
