"""
Decomposable approximations of labeled embedding sets.
Computes the base point and one tangent direction per primitive (dense,
noise-weighted and sparse variants), composes primitives into embeddings of
arbitrary tuples, and measures how far the data is from its approximation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import TYPE_CHECKING, Iterator, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import sparse

from config.config import CENTERING_TOL, RANK_RTOL
from src.errors import (
    ConfigError,
    CoverageError,
    DecompositionError,
    DegenerateNoise,
    DimensionError,
    EmptyInput,
    StructureError,
    UnknownPrimitive,
)
from src.karcher import MeanConfig, intrinsic_mean
from src.manifold import Geometry, GeometryKind, ManifoldPoint, TangentVector

if TYPE_CHECKING:
    from src.noise import NoiseModel

logger = logging.getLogger(__name__)

LABEL_SEP = "|"

PrimitiveKey = Union[str, tuple]


# =============================================================================
# Composition space
# =============================================================================
@dataclass(frozen=True)
class Factor:
    name: str
    primitives: tuple

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(str(p) for p in self.primitives))


class CompositionSpace:
    """Cartesian product of named factors, each a list of primitive names."""

    def __init__(self, factors: Union[Mapping[str, Sequence[str]], Sequence]):
        if isinstance(factors, Mapping):
            items = [Factor(str(name), tuple(prims)) for name, prims in factors.items()]
        else:
            items = [f if isinstance(f, Factor) else Factor(str(f[0]), tuple(f[1])) for f in factors]
        if not items:
            raise ConfigError("a composition space needs at least one factor")
        names = [f.name for f in items]
        if len(set(names)) != len(names):
            raise ConfigError("factor names must be unique", {"factors": names})
        for f in items:
            if not f.primitives:
                raise ConfigError(f"factor '{f.name}' is empty", {"factor": f.name})
            if len(set(f.primitives)) != len(f.primitives):
                raise ConfigError(f"factor '{f.name}' repeats a primitive", {"factor": f.name})
        self.factors = tuple(items)
        self._index = [{p: j for j, p in enumerate(f.primitives)} for f in self.factors]
        self.sizes = tuple(len(f.primitives) for f in self.factors)
        self.offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    def __eq__(self, other) -> bool:
        return isinstance(other, CompositionSpace) and self.factors == other.factors

    def __hash__(self) -> int:
        return hash(self.factors)

    def __repr__(self) -> str:
        dims = "x".join(str(s) for s in self.sizes)
        return f"CompositionSpace({dims}: {', '.join(f.name for f in self.factors)})"

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    @property
    def size(self) -> int:
        return int(np.prod(self.sizes))

    @property
    def n_primitives(self) -> int:
        return int(sum(self.sizes))

    def index(self, factor: int, name: str) -> int:
        try:
            return self._index[factor][str(name)]
        except KeyError:
            raise UnknownPrimitive(
                f"'{name}' is not a primitive of factor '{self.factors[factor].name}'",
                {"factor": self.factors[factor].name, "primitive": str(name)},
            )

    def encode(self, z: Sequence[str]) -> tuple:
        """Primitive names -> per-factor indices."""
        z = tuple(z)
        if len(z) != self.n_factors:
            raise DimensionError(
                f"tuple {z} has {len(z)} components, the space has {self.n_factors} factors",
                {"tuple": list(z)},
            )
        return tuple(self.index(i, name) for i, name in enumerate(z))

    def decode(self, codes: Sequence[int]) -> tuple:
        return tuple(self.factors[i].primitives[int(c)] for i, c in enumerate(codes))

    def tuple_ids(self, codes: np.ndarray) -> np.ndarray:
        """Flat tuple index of each row of an (N, s) code matrix."""
        return np.ravel_multi_index(tuple(np.asarray(codes).T), self.sizes)

    def tuple_codes(self, ids) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(ids), self.sizes), axis=-1)

    def tuple_id(self, z: Sequence[str]) -> int:
        return int(np.ravel_multi_index(self.encode(z), self.sizes))

    def tuples(self) -> Iterator[tuple]:
        return product(*(f.primitives for f in self.factors))

    def label(self, z: Sequence[str]) -> str:
        return LABEL_SEP.join(z)

    def primitive_keys(self) -> list:
        """Qualified 'factor:primitive' names in direction-matrix order."""
        return [f"{f.name}:{p}" for f in self.factors for p in f.primitives]

    def resolve(self, key: PrimitiveKey) -> int:
        """
        Row of a primitive in the direction matrix.
        Accepts (factor, name) pairs, 'factor:name' strings, or a bare name
        that is unambiguous across factors.
        """
        if isinstance(key, tuple):
            factor, name = key
            i = factor if isinstance(factor, int) else self._factor_position(factor)
            return self.offsets[i] + self.index(i, name)
        key = str(key)
        if ":" in key:
            factor, name = key.split(":", 1)
            if factor in {f.name for f in self.factors}:
                i = self._factor_position(factor)
                return self.offsets[i] + self.index(i, name)
        hits = [i for i in range(self.n_factors) if key in self._index[i]]
        if len(hits) == 1:
            return self.offsets[hits[0]] + self._index[hits[0]][key]
        if not hits:
            raise UnknownPrimitive(f"unknown primitive '{key}'", {"primitive": key})
        raise UnknownPrimitive(
            f"primitive '{key}' is ambiguous; qualify it as 'factor:{key}'",
            {"primitive": key, "factors": [self.factors[i].name for i in hits]},
        )

    def _factor_position(self, name: str) -> int:
        for i, f in enumerate(self.factors):
            if f.name == name:
                return i
        raise UnknownPrimitive(f"unknown factor '{name}'", {"factor": name})

    def permuted(self, order: Sequence[int]) -> "CompositionSpace":
        return CompositionSpace([self.factors[i] for i in order])

    def to_dict(self) -> dict:
        return {"factors": [{"name": f.name, "primitives": list(f.primitives)} for f in self.factors]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "CompositionSpace":
        try:
            return cls([(f["name"], f["primitives"]) for f in data["factors"]])
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed composition space: {e}")


# =============================================================================
# Labeled embedding sets
# =============================================================================
@dataclass(frozen=True, eq=False)
class LabeledEmbeddingSet:
    """N manifold points, each labeled with a composite tuple and a sample id."""

    geometry: Geometry
    rows: np.ndarray
    codes: np.ndarray
    sample_ids: tuple
    space: CompositionSpace

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        codes = np.atleast_2d(np.asarray(self.codes, dtype=np.int64))
        if rows.shape[0] == 0 or codes.size == 0:
            raise EmptyInput("a labeled embedding set needs at least one row")
        if codes.shape != (rows.shape[0], self.space.n_factors):
            raise DimensionError(
                f"labels have shape {codes.shape}, expected ({rows.shape[0]}, {self.space.n_factors})",
                {"rows": rows.shape[0]},
            )
        if np.any(codes < 0) or np.any(codes >= np.asarray(self.space.sizes)):
            raise UnknownPrimitive("label codes fall outside the composition space")
        self.geometry.check_points(rows, what="row")
        ids = tuple(str(s) for s in self.sample_ids) if self.sample_ids is not None else ()
        if not ids:
            ids = tuple(str(i) for i in range(rows.shape[0]))
        if len(ids) != rows.shape[0]:
            raise DimensionError("one sample id per row is required", {"ids": len(ids), "rows": rows.shape[0]})
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "sample_ids", ids)

    @classmethod
    def from_labels(
        cls,
        geometry: Geometry,
        rows: np.ndarray,
        labels: Sequence[Sequence[str]],
        space: CompositionSpace,
        sample_ids: Optional[Sequence[str]] = None,
    ) -> "LabeledEmbeddingSet":
        codes = np.array([space.encode(z) for z in labels], dtype=np.int64).reshape(-1, space.n_factors)
        return cls(geometry, rows, codes, tuple(sample_ids) if sample_ids is not None else (), space)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def tuple_ids(self) -> np.ndarray:
        return self.space.tuple_ids(self.codes)

    @property
    def labels(self) -> list:
        return [self.space.decode(c) for c in self.codes]

    def seen_ids(self) -> np.ndarray:
        """Sorted flat ids of the tuples with at least one row."""
        return np.unique(self.tuple_ids)

    def seen(self) -> frozenset:
        return frozenset(self.space.decode(c) for c in self.space.tuple_codes(self.seen_ids()))

    def subset(self, index) -> "LabeledEmbeddingSet":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return LabeledEmbeddingSet(
            self.geometry,
            self.rows[index],
            self.codes[index],
            tuple(self.sample_ids[i] for i in index),
            self.space,
        )

    def permute_factors(self, order: Sequence[int]) -> "LabeledEmbeddingSet":
        return LabeledEmbeddingSet(
            self.geometry, self.rows, self.codes[:, list(order)], self.sample_ids, self.space.permuted(order)
        )

    def with_geometry(self, geometry: Geometry) -> "LabeledEmbeddingSet":
        """Reinterpret the rows under another geometry (e.g. Euclidean for the linear baseline)."""
        rows = geometry.project(self.rows) if geometry.kind is not GeometryKind.EUCLIDEAN else self.rows
        return LabeledEmbeddingSet(geometry, rows, self.codes, self.sample_ids, self.space)


# =============================================================================
# Decomposition
# =============================================================================
@dataclass(frozen=True, eq=False)
class Decomposition:
    """
    Base point plus one tangent direction per primitive.
    `directions` has one row per primitive in space order; `denoised` keeps the
    noise-weighted tangent representation of every seen tuple.
    """

    mu: ManifoldPoint
    directions: np.ndarray
    space: CompositionSpace
    seen_ids: tuple
    denoised: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        directions = np.asarray(self.directions, dtype=np.float64)
        if directions.shape != (self.space.n_primitives, self.mu.coords.shape[0]):
            raise DimensionError(
                f"direction matrix has shape {directions.shape}, "
                f"expected ({self.space.n_primitives}, {self.mu.coords.shape[0]})"
            )
        directions.setflags(write=False)
        object.__setattr__(self, "directions", directions)
        object.__setattr__(self, "seen_ids", tuple(int(i) for i in self.seen_ids))

    @property
    def geometry(self) -> Geometry:
        return self.mu.geometry

    @property
    def seen(self) -> frozenset:
        return frozenset(self.space.decode(c) for c in self.space.tuple_codes(list(self.seen_ids)))

    def direction(self, primitive: PrimitiveKey) -> TangentVector:
        return TangentVector(self.directions[self.space.resolve(primitive)], self.mu)

    def tangent(self, z: Sequence[str]) -> np.ndarray:
        """Sum of the directions of a tuple's primitives."""
        codes = self.space.encode(z)
        rows = [self.space.offsets[i] + c for i, c in enumerate(codes)]
        return self.directions[rows].sum(axis=0)

    def tangents(self, codes: np.ndarray) -> np.ndarray:
        """Vectorized `tangent` over an (M, s) code matrix."""
        codes = np.asarray(codes)
        total = np.zeros((codes.shape[0], self.directions.shape[1]))
        for i, offset in enumerate(self.space.offsets):
            total += self.directions[offset + codes[:, i]]
        return total


# =============================================================================
# Construction
# =============================================================================
def tuple_probabilities(data: LabeledEmbeddingSet, noise: Optional["NoiseModel"]) -> np.ndarray:
    """Per-row probabilities renormalized within each tuple."""
    _, inv = np.unique(data.tuple_ids, return_inverse=True)
    inv = inv.reshape(-1)
    if noise is None:
        counts = np.bincount(inv)
        return 1.0 / counts[inv]
    probs = np.asarray(noise.probs, dtype=np.float64).reshape(-1)
    if probs.shape[0] != len(data):
        raise DimensionError(
            f"noise model has {probs.shape[0]} scores for {len(data)} rows",
            {"scores": int(probs.shape[0]), "rows": len(data)},
        )
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise DegenerateNoise("noise scores must be finite and nonnegative")
    mass = np.bincount(inv, weights=probs)
    empty = np.flatnonzero(mass <= 0)
    if empty.size:
        seen_ids = np.unique(data.tuple_ids)
        names = [data.space.label(data.space.decode(c)) for c in data.space.tuple_codes(seen_ids[empty])]
        raise DegenerateNoise(f"tuple(s) with zero noise mass: {', '.join(names[:5])}", {"tuples": names})
    return probs / mass[inv]


def _uncovered(data: LabeledEmbeddingSet) -> list:
    missing = []
    for i, f in enumerate(data.space.factors):
        present = np.zeros(len(f.primitives), dtype=bool)
        present[np.unique(data.codes[:, i])] = True
        missing += [f"{f.name}:{p}" for p, ok in zip(f.primitives, present) if not ok]
    return missing


def _decompose(
    data: LabeledEmbeddingSet,
    noise: Optional["NoiseModel"],
    cfg: Optional[MeanConfig],
) -> Decomposition:
    g, space = data.geometry, data.space
    probs = tuple_probabilities(data, noise)
    seen_ids, inv = np.unique(data.tuple_ids, return_inverse=True)
    inv = inv.reshape(-1)
    n_seen = seen_ids.shape[0]

    # global weights p / sum(p); the sum equals the number of seen tuples
    weights = probs / probs.sum()
    mean = intrinsic_mean(data.rows, weights, cfg, geometry=g)
    mu = mean.mean.coords

    logs = g.log(mu, data.rows)
    pooling = sparse.csr_matrix((probs, (inv, np.arange(len(data)))), shape=(n_seen, len(data)))
    denoised = np.asarray(pooling @ logs)

    seen_codes = space.tuple_codes(seen_ids)
    dense = n_seen == space.size
    blocks, offsets, low_support = [], {}, []
    for i, f in enumerate(space.factors):
        membership = sparse.csr_matrix(
            (np.ones(n_seen), (seen_codes[:, i], np.arange(n_seen))), shape=(len(f.primitives), n_seen)
        )
        support = np.asarray(membership.sum(axis=1)).reshape(-1)
        block = np.asarray(membership @ denoised) / support[:, None]
        offsets[f.name] = float(np.linalg.norm(block.sum(axis=0)))
        if dense:
            # the block mean is the tangent mean left over by a tolerance-limited mu
            block = block - block.mean(axis=0)
        blocks.append(block)
        low_support += [f"{f.name}:{p}" for p, k in zip(f.primitives, support) if k == 1]

    directions = g.to_tangent(mu, np.vstack(blocks))
    residuals = {
        f.name: float(np.linalg.norm(directions[o:o + n].sum(axis=0)))
        for f, o, n in zip(space.factors, space.offsets, space.sizes)
    }
    if low_support and len(low_support) < space.n_primitives:
        logger.info("Primitives supported by a single tuple: %s", ", ".join(low_support[:10]))
    if dense:
        for f, size in zip(space.factors, space.sizes):
            if offsets[f.name] > CENTERING_TOL * size:
                logger.debug("Re-centered factor '%s' (offset %.3e)", f.name, offsets[f.name])
            if not residuals[f.name] <= CENTERING_TOL * size:
                raise DecompositionError(
                    f"directions of factor '{f.name}' stay off-center by {residuals[f.name]:.3e}",
                    {"factor": f.name, "residual": residuals[f.name], "bound": CENTERING_TOL * size},
                )

    mean_info = mean.to_dict()
    mean_info.pop("mean")
    diagnostics = {
        "mean": mean_info,
        "closeness": mean.closeness.to_dict() if mean.closeness else None,
        "centering_residuals": residuals,
        "centering_offsets": offsets,
        "low_support": low_support,
        "dense": bool(dense),
        "n_rows": len(data),
        "n_seen": int(n_seen),
        "noise": noise.describe() if noise is not None else {"mode": "uniform"},
    }
    return Decomposition(
        mu=mean.mean,
        directions=directions,
        space=space,
        seen_ids=tuple(seen_ids.tolist()),
        denoised=denoised,
        diagnostics=diagnostics,
    )


def decompose_simple(data: LabeledEmbeddingSet, cfg: Optional[MeanConfig] = None) -> Decomposition:
    """Best decomposable approximation of a set with exactly one row per tuple."""
    counts = np.bincount(data.tuple_ids, minlength=data.space.size)
    if np.any(counts != 1):
        raise StructureError(
            "decompose_simple needs exactly one row per tuple "
            f"({int(np.sum(counts == 0))} missing, {int(np.sum(counts > 1))} repeated); "
            "use decompose_sparse instead",
            {"missing": int(np.sum(counts == 0)), "repeated": int(np.sum(counts > 1)), "hint": "decompose_sparse"},
        )
    return _decompose(data, None, cfg)


def decompose_weighted(
    data: LabeledEmbeddingSet,
    noise: Optional["NoiseModel"] = None,
    cfg: Optional[MeanConfig] = None,
) -> Decomposition:
    """Noise-weighted decomposition; every tuple needs at least one row."""
    counts = np.bincount(data.tuple_ids, minlength=data.space.size)
    if np.any(counts == 0):
        raise StructureError(
            f"{int(np.sum(counts == 0))} tuple(s) have no rows; use decompose_sparse instead",
            {"missing": int(np.sum(counts == 0)), "hint": "decompose_sparse"},
        )
    return _decompose(data, noise, cfg)


def decompose_sparse(
    data: LabeledEmbeddingSet,
    noise: Optional["NoiseModel"] = None,
    cfg: Optional[MeanConfig] = None,
) -> Decomposition:
    """
    Decomposition from the available tuples only.
    Slice means run over the seen tuples containing each primitive, so every
    primitive must appear in at least one labeled row; unseen tuples are still
    reachable through `compose`.
    """
    if len(data) == 0:
        raise EmptyInput("no rows to decompose")
    missing = _uncovered(data)
    if missing:
        raise CoverageError(
            f"primitive(s) with no labeled row: {', '.join(missing[:10])}",
            {"primitives": missing},
        )
    return _decompose(data, noise, cfg)


# =============================================================================
# Composition and diagnostics
# =============================================================================
def compose(dec: Decomposition, z: Sequence[str]) -> ManifoldPoint:
    """Exp_mu of the summed primitive directions; defined for seen and unseen tuples."""
    g = dec.geometry
    return ManifoldPoint(g.exp(dec.mu.coords, dec.tangent(z)), g)


def compose_all(dec: Decomposition, tuples: Optional[Sequence[Sequence[str]]] = None) -> tuple[list, np.ndarray]:
    """Compose many tuples at once (all of the space by default)."""
    tuples = list(dec.space.tuples()) if tuples is None else [tuple(z) for z in tuples]
    if not tuples:
        return [], np.zeros((0, dec.mu.coords.shape[0]))
    codes = np.array([dec.space.encode(z) for z in tuples], dtype=np.int64)
    points = dec.geometry.exp(dec.mu.coords[None, :], dec.tangents(codes))
    return tuples, points


def compose_scaled(dec: Decomposition, coefficients: Mapping[PrimitiveKey, float]) -> ManifoldPoint:
    """Exp_mu of an arbitrary linear combination of primitive directions (unlisted ones get 0)."""
    total = np.zeros_like(dec.mu.coords)
    for key, alpha in coefficients.items():
        total = total + float(alpha) * dec.directions[dec.space.resolve(key)]
    return ManifoldPoint(dec.geometry.exp(dec.mu.coords, total), dec.geometry)


@dataclass(frozen=True)
class ResidualReport:
    per_tuple: dict
    weighted_total: float

    def to_dict(self) -> dict:
        return {
            "per_tuple": {LABEL_SEP.join(z): v for z, v in sorted(self.per_tuple.items())},
            "weighted_total": self.weighted_total,
        }


def _fitted_rows(dec: Decomposition, data: LabeledEmbeddingSet) -> np.ndarray:
    if data.space != dec.space:
        raise StructureError("labels do not share the decomposition's composition space")
    return dec.tangents(data.codes)


def residuals(
    dec: Decomposition,
    data: LabeledEmbeddingSet,
    noise: Optional["NoiseModel"] = None,
) -> ResidualReport:
    """Noise-weighted squared geodesic distance between each row and its composed tuple."""
    g = dec.geometry
    probs = tuple_probabilities(data, noise)
    composed = g.exp(dec.mu.coords[None, :], _fitted_rows(dec, data))
    sq = probs * g.dist(data.rows, composed) ** 2
    ids = data.tuple_ids
    per_id = np.bincount(np.unique(ids, return_inverse=True)[1].reshape(-1), weights=sq)
    per_tuple = {
        data.space.decode(c): float(v) for c, v in zip(data.space.tuple_codes(np.unique(ids)), per_id)
    }
    return ResidualReport(per_tuple=per_tuple, weighted_total=float(per_id.sum()))


def tangent_objective(
    dec: Decomposition,
    data: LabeledEmbeddingSet,
    noise: Optional["NoiseModel"] = None,
) -> float:
    """Noise-weighted squared tangent-space error, the surrogate the closed form minimizes."""
    g = dec.geometry
    probs = tuple_probabilities(data, noise)
    diff = g.log(dec.mu.coords, data.rows) - _fitted_rows(dec, data)
    return float(probs @ g.norm(diff) ** 2)


def subspace_rank(dec: Decomposition) -> int:
    """Numerical rank of the stacked primitive directions."""
    if dec.directions.size == 0:
        return 0
    sv = np.linalg.svd(dec.directions, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > RANK_RTOL * sv[0]))


def centering_residuals(dec: Decomposition) -> dict:
    """Norm of the summed directions of each factor."""
    return {
        f.name: float(np.linalg.norm(dec.directions[o:o + n].sum(axis=0)))
        for f, o, n in zip(dec.space.factors, dec.space.offsets, dec.space.sizes)
    }
