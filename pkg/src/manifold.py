"""
Geometry primitives for embedding spaces.
Distance, exponential/logarithmic maps and projections on the unit sphere,
the Lorentz hyperboloid and Euclidean space. Array methods on `Geometry` are
batched over leading axes; the module-level functions work on typed points.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from config.config import CUT_LOCUS_TOL, LORENTZ_CLOSENESS_RADIUS, MEMBERSHIP_TOL
from src.errors import (
    ConfigError,
    CutLocusError,
    DegenerateInput,
    DimensionError,
    EmptyInput,
    ManifoldViolation,
)

logger = logging.getLogger(__name__)


class GeometryKind(str, Enum):
    SPHERE = "sphere"
    LORENTZ = "lorentz"
    EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class Geometry:
    """
    A Riemannian geometry over d-dimensional embeddings.
    Lorentz points carry d spatial coordinates plus a leading time coordinate.
    """

    kind: GeometryKind
    ambient_dim: int
    curvature: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", GeometryKind(self.kind))
        except ValueError:
            raise ConfigError(f"Unknown geometry '{self.kind}'", {"kind": str(self.kind)})
        if int(self.ambient_dim) < 1:
            raise ConfigError("ambient_dim must be positive", {"ambient_dim": self.ambient_dim})
        if not self.curvature > 0:
            raise ConfigError("curvature must be positive", {"curvature": self.curvature})
        object.__setattr__(self, "ambient_dim", int(self.ambient_dim))
        object.__setattr__(self, "curvature", float(self.curvature))

    @classmethod
    def sphere(cls, dim: int) -> "Geometry":
        return cls(GeometryKind.SPHERE, dim)

    @classmethod
    def lorentz(cls, dim: int, curvature: float = 1.0) -> "Geometry":
        return cls(GeometryKind.LORENTZ, dim, curvature)

    @classmethod
    def euclidean(cls, dim: int) -> "Geometry":
        return cls(GeometryKind.EUCLIDEAN, dim)

    @property
    def coord_dim(self) -> int:
        """Length of a stored coordinate vector."""
        return self.ambient_dim + 1 if self.kind is GeometryKind.LORENTZ else self.ambient_dim

    @property
    def injectivity_radius(self) -> float:
        return float(np.pi) if self.kind is GeometryKind.SPHERE else float("inf")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "ambient_dim": self.ambient_dim, "curvature": self.curvature}

    # =========================================================================
    # Inner products and norms
    # =========================================================================
    def inner(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Ambient inner product (Lorentzian for the hyperboloid)."""
        prod = np.sum(x * y, axis=-1)
        if self.kind is GeometryKind.LORENTZ:
            prod = prod - 2.0 * x[..., 0] * y[..., 0]
        return prod

    def norm(self, v: np.ndarray) -> np.ndarray:
        """Riemannian norm of tangent vectors."""
        if self.kind is GeometryKind.LORENTZ:
            return np.sqrt(np.maximum(self.inner(v, v), 0.0))
        return np.linalg.norm(v, axis=-1)

    # =========================================================================
    # Membership
    # =========================================================================
    def check_dim(self, x: np.ndarray, what: str = "point") -> None:
        if x.shape[-1] != self.coord_dim:
            raise DimensionError(
                f"{what} has {x.shape[-1]} coordinates, expected {self.coord_dim}",
                {"expected": self.coord_dim, "got": int(x.shape[-1])},
            )

    def membership_error(self, x: np.ndarray) -> np.ndarray:
        """Per-point violation of the manifold constraint (0 for Euclidean)."""
        if self.kind is GeometryKind.SPHERE:
            return np.abs(np.linalg.norm(x, axis=-1) - 1.0)
        if self.kind is GeometryKind.LORENTZ:
            # relative to the time coordinate so large radii do not trip the check
            scale = np.maximum(1.0, self.curvature * x[..., 0] ** 2)
            err = np.abs(self.inner(x, x) + 1.0 / self.curvature) / scale
            return np.where(x[..., 0] > 0, err, np.inf)
        return np.zeros(x.shape[:-1])

    def check_points(self, x: np.ndarray, tol: float = MEMBERSHIP_TOL, what: str = "point") -> None:
        """Raise unless every point lies on the manifold."""
        self.check_dim(x, what)
        if not np.all(np.isfinite(x)):
            raise ManifoldViolation(f"{what} has non-finite coordinates")
        err = np.atleast_1d(self.membership_error(x))
        bad = np.flatnonzero(err > tol)
        if bad.size:
            raise ManifoldViolation(
                f"{bad.size} {what}(s) off the {self.kind.value} beyond tolerance {tol:g}",
                {"rows": bad[:10].tolist(), "max_error": float(np.max(err))},
            )

    # =========================================================================
    # Projections
    # =========================================================================
    def project(self, x: np.ndarray) -> np.ndarray:
        """Map raw vectors onto the manifold."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind is GeometryKind.SPHERE:
            self.check_dim(x, "vector")
            norms = np.linalg.norm(x, axis=-1, keepdims=True)
            zero = np.flatnonzero(np.atleast_1d(norms[..., 0]) == 0)
            if zero.size:
                raise DegenerateInput("cannot normalize a zero vector onto the sphere", {"rows": zero[:10].tolist()})
            return x / norms
        if self.kind is GeometryKind.LORENTZ:
            if x.shape[-1] == self.coord_dim:
                x = x[..., 1:]
            elif x.shape[-1] != self.ambient_dim:
                raise DimensionError(
                    f"vector has {x.shape[-1]} coordinates, expected {self.ambient_dim} spatial ones",
                    {"expected": self.ambient_dim, "got": int(x.shape[-1])},
                )
            time = np.sqrt(1.0 / self.curvature + np.sum(x * x, axis=-1, keepdims=True))
            return np.concatenate([time, x], axis=-1)
        self.check_dim(x, "vector")
        return x

    def to_tangent(self, mu: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto the tangent space at mu."""
        if self.kind is GeometryKind.SPHERE:
            return w - np.sum(mu * w, axis=-1, keepdims=True) * mu
        if self.kind is GeometryKind.LORENTZ:
            return w + self.curvature * self.inner(mu, w)[..., None] * mu
        return w

    # =========================================================================
    # Distance, exponential and logarithmic maps
    # =========================================================================
    def dist(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Geodesic distance (radians on the sphere)."""
        if self.kind is GeometryKind.SPHERE:
            # equals arccos(u.v) without its loss of precision near 0 and pi
            return 2.0 * np.arctan2(np.linalg.norm(u - v, axis=-1), np.linalg.norm(u + v, axis=-1))
        if self.kind is GeometryKind.LORENTZ:
            diff = u - v
            # -c<u,v>_L - 1, computed from the difference to keep small distances exact
            x = np.maximum(0.5 * self.curvature * self.inner(diff, diff), 0.0)
            return np.log1p(x + np.sqrt(x * (x + 2.0))) / np.sqrt(self.curvature)
        return np.linalg.norm(u - v, axis=-1)

    def exp(self, mu: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Exponential map, re-projected onto the manifold."""
        if self.kind is GeometryKind.EUCLIDEAN:
            return mu + v
        n = self.norm(v)[..., None]
        safe = np.where(n > 0, n, 1.0)
        if self.kind is GeometryKind.SPHERE:
            out = np.cos(n) * mu + np.sin(n) * (v / safe)
            out = out / np.linalg.norm(out, axis=-1, keepdims=True)
        else:
            theta = np.sqrt(self.curvature) * n
            safe_theta = np.where(theta > 0, theta, 1.0)
            out = np.cosh(theta) * mu + np.sinh(theta) * (v / safe_theta)
            out = self.project(out[..., 1:])
        return np.where(n > 0, out, mu)

    def log(self, mu: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Logarithmic map; raises CutLocusError near the antipode on the sphere."""
        if self.kind is GeometryKind.EUCLIDEAN:
            return u - mu
        if self.kind is GeometryKind.SPHERE:
            ip = np.sum(mu * u, axis=-1)
            cut = np.flatnonzero(np.atleast_1d(1.0 + ip) < CUT_LOCUS_TOL)
            if cut.size:
                raise CutLocusError(
                    f"{cut.size} point(s) within {CUT_LOCUS_TOL:g} of the antipode of the base point",
                    {"rows": cut[:10].tolist()},
                )
            w = u - ip[..., None] * mu
        else:
            w = self.to_tangent(mu, u)
        theta = self.dist(mu, u)[..., None]
        wn = self.norm(w)[..., None]
        out = theta * (w / np.where(wn > 0, wn, 1.0))
        out = np.where(wn > 0, out, 0.0)
        return self.to_tangent(mu, out)

    def similarity(self, queries: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        """Score matrix (queries x anchors); negative distance on the hyperboloid."""
        if self.kind is GeometryKind.LORENTZ:
            alpha = self.curvature * (
                np.outer(queries[:, 0], anchors[:, 0]) - queries[:, 1:] @ anchors[:, 1:].T
            )
            return -np.arccosh(np.maximum(alpha, 1.0)) / np.sqrt(self.curvature)
        return queries @ anchors.T


# =============================================================================
# Typed points
# =============================================================================
@dataclass(frozen=True, eq=False)
class ManifoldPoint:
    """A point on a geometry; coords are a read-only float64 vector."""

    coords: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64).reshape(-1)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)


@dataclass(frozen=True, eq=False)
class TangentVector:
    """A tangent vector attached to its base point."""

    coords: np.ndarray
    base: ManifoldPoint

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64).reshape(-1)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def geometry(self) -> Geometry:
        return self.base.geometry

    @property
    def norm(self) -> float:
        return float(self.geometry.norm(self.coords))


@dataclass(frozen=True)
class ClosenessReport:
    avg: float
    max: float
    within_half_pi: bool

    def to_dict(self) -> dict:
        return {"avg": self.avg, "max": self.max, "within_half_pi": self.within_half_pi}


PointsLike = Union[Sequence[ManifoldPoint], np.ndarray]


def as_point_matrix(points: PointsLike, geometry: Optional[Geometry] = None) -> tuple[Geometry, np.ndarray]:
    """Normalize a list of ManifoldPoint (or a raw matrix plus geometry) into (geometry, N x D array)."""
    if isinstance(points, np.ndarray):
        if geometry is None:
            raise ConfigError("a geometry is required when points are given as an array")
        matrix = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if matrix.shape[0] == 0:
            raise EmptyInput("no points given")
        geometry.check_points(matrix)
        return geometry, matrix
    points = list(points)
    if not points:
        raise EmptyInput("no points given")
    geometry = geometry or points[0].geometry
    if any(p.geometry != geometry for p in points):
        raise DimensionError("points live on different geometries")
    matrix = np.stack([p.coords for p in points])
    geometry.check_points(matrix)
    return geometry, matrix


def _check_point(g: Geometry, u: ManifoldPoint, what: str = "point") -> np.ndarray:
    g.check_points(u.coords, what=what)
    return u.coords


def distance(g: Geometry, u: ManifoldPoint, u2: ManifoldPoint) -> float:
    """Intrinsic distance between two points."""
    return float(g.dist(_check_point(g, u), _check_point(g, u2)))


def exp_map(g: Geometry, mu: ManifoldPoint, v: TangentVector) -> ManifoldPoint:
    """Move from mu along the geodesic with initial velocity v for unit time."""
    base = _check_point(g, mu, "base point")
    g.check_dim(v.coords, "tangent vector")
    if v.base is not mu and not np.allclose(v.base.coords, base, rtol=0.0, atol=MEMBERSHIP_TOL):
        raise ManifoldViolation(
            "tangent vector is attached to another base point",
            {"offset": float(np.max(np.abs(v.base.coords - base)))},
        )
    return ManifoldPoint(g.exp(base, v.coords), g)


def log_map(g: Geometry, mu: ManifoldPoint, u: ManifoldPoint) -> TangentVector:
    """Tangent vector at mu pointing to u with length equal to their distance."""
    base = _check_point(g, mu, "base point")
    return TangentVector(g.log(base, _check_point(g, u)), mu)


def project_to_manifold(g: Geometry, x) -> ManifoldPoint:
    """Normalize a raw vector onto the geometry."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DegenerateInput("vector has non-finite coordinates")
    return ManifoldPoint(g.project(x), g)


def project_to_tangent(g: Geometry, mu: ManifoldPoint, w) -> TangentVector:
    """Project a raw vector onto the tangent space at mu."""
    base = _check_point(g, mu, "base point")
    w = np.asarray(w, dtype=np.float64)
    g.check_dim(w, "vector")
    return TangentVector(g.to_tangent(base, w), mu)


def closeness_report(
    points: PointsLike,
    center: ManifoldPoint,
    radius: Optional[float] = None,
) -> ClosenessReport:
    """
    Distance statistics of a point set around a center.
    The flag tells whether every point lies strictly inside the ball where the
    intrinsic mean is unique (pi/2 on the sphere).
    """
    g = center.geometry
    _, matrix = as_point_matrix(points, g)
    d = g.dist(matrix, _check_point(g, center, "center"))
    max_d = float(np.max(d))
    if g.kind is GeometryKind.SPHERE:
        within = max_d < (np.pi / 2 if radius is None else radius)
    elif g.kind is GeometryKind.LORENTZ:
        within = max_d < (LORENTZ_CLOSENESS_RADIUS if radius is None else radius)
    else:
        within = True
    return ClosenessReport(avg=float(np.mean(d)), max=max_d, within_half_pi=bool(within))
