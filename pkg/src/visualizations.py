"""Tangent-space PCA projections exported as coordinate tables for external plotting."""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from config.config import RANK_RTOL
from src.decompose import Decomposition, LABEL_SEP
from src.errors import ConfigError, DimensionError, EmptyInput
from src.manifold import TangentVector

logger = logging.getLogger(__name__)

PROJECTION_SOURCES = ("denoised", "composed", "primitives")


@dataclass(frozen=True, eq=False)
class Projection:
    coords: np.ndarray
    explained_variance: np.ndarray
    components: np.ndarray
    labels: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        """One row per vector: label then pc1..pck."""
        df = pd.DataFrame(self.coords, columns=[f"pc{i + 1}" for i in range(self.coords.shape[1])])
        labels = self.labels or [str(i) for i in range(self.coords.shape[0])]
        df.insert(0, "label", labels)
        return df

    def to_dict(self) -> dict:
        total = float(np.sum(self.explained_variance))
        return {
            "n_vectors": int(self.coords.shape[0]),
            "dim": int(self.coords.shape[1]),
            "explained_variance": self.explained_variance.tolist(),
            "explained_ratio": (self.explained_variance / total).tolist() if total > 0 else [0.0] * len(self.explained_variance),
            "diagnostics": dict(self.diagnostics),
        }


def _as_matrix(vectors: Union[Sequence[TangentVector], np.ndarray]) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    vectors = list(vectors)
    if not vectors:
        raise EmptyInput("no vectors to project")
    base = vectors[0].base.coords
    if any(not np.array_equal(v.base.coords, base) for v in vectors[1:]):
        raise DimensionError("tangent vectors must share one base point")
    return np.stack([v.coords for v in vectors])


def pca_project(
    vectors: Union[Sequence[TangentVector], np.ndarray],
    out_dim: int = 2,
    labels: Optional[Sequence[str]] = None,
) -> Projection:
    """
    Centered SVD projection to out_dim coordinates.
    Each axis is signed so its largest-magnitude loading is positive. When the
    data has lower rank the extra axes are zero and flagged in diagnostics.
    """
    if out_dim not in (2, 3):
        raise ConfigError("out_dim must be 2 or 3", {"out_dim": out_dim})
    X = _as_matrix(vectors)
    n = X.shape[0]
    if n == 0:
        raise EmptyInput("no vectors to project")
    if n < out_dim + 1:
        raise ConfigError(f"need at least {out_dim + 1} vectors for a {out_dim}-d projection", {"n": n})

    centered = X - X.mean(axis=0)
    U, S, Vt = np.linalg.svd(centered, full_matrices=False)
    rank = 0 if S.size == 0 or S[0] == 0 else int(np.sum(S > RANK_RTOL * S[0]))
    k = min(out_dim, rank)

    components = np.zeros((out_dim, X.shape[1]))
    coords = np.zeros((n, out_dim))
    for i in range(k):
        axis = Vt[i]
        sign = 1.0 if axis[np.argmax(np.abs(axis))] >= 0 else -1.0
        components[i] = sign * axis
        coords[:, i] = sign * U[:, i] * S[i]

    variance = np.zeros(out_dim)
    variance[:k] = S[:k] ** 2 / max(n - 1, 1)
    diagnostics = {"rank": rank}
    if k < out_dim:
        logger.info("Vectors span %d dimension(s); padding the projection with zeros", rank)
        diagnostics["reduced_rank"] = True
    return Projection(
        coords=coords,
        explained_variance=variance,
        components=components,
        labels=list(labels) if labels is not None else [],
        diagnostics=diagnostics,
    )


def projection_source(dec: Decomposition, source: str = "denoised") -> tuple[list, np.ndarray]:
    """Labels and tangent vectors of a decomposition to feed into pca_project."""
    space = dec.space
    if source == "denoised":
        if dec.denoised.size == 0:
            raise EmptyInput("this decomposition carries no denoised tuple vectors")
        codes = space.tuple_codes(list(dec.seen_ids))
        return [space.label(space.decode(c)) for c in codes], np.asarray(dec.denoised)
    if source == "composed":
        tuples = list(space.tuples())
        codes = np.array([space.encode(z) for z in tuples])
        return [LABEL_SEP.join(z) for z in tuples], dec.tangents(codes)
    if source == "primitives":
        return space.primitive_keys(), np.asarray(dec.directions)
    raise ConfigError(f"unknown projection source '{source}'", {"source": source, "allowed": list(PROJECTION_SOURCES)})
