import numpy as np
import pytest

from src.decompose import CompositionSpace, LabeledEmbeddingSet
from src.manifold import Geometry

PAIRS_2X2 = [("a1", "o1"), ("a1", "o2"), ("a2", "o1"), ("a2", "o2")]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def space_2x2():
    return CompositionSpace.from_dict({"factors": [
        {"name": "attr", "primitives": ["a1", "a2"]},
        {"name": "obj", "primitives": ["o1", "o2"]},
    ]})


@pytest.fixture
def euclid_2x2(space_2x2):
    """One point per tuple on a 2x2 grid, exactly decomposable."""
    rows = np.array([[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]])
    return LabeledEmbeddingSet.from_labels(Geometry.euclidean(2), rows, PAIRS_2X2, space_2x2)


@pytest.fixture
def euclid_sparse(space_2x2):
    """The 2x2 grid with (a2, o2) left out."""
    rows = np.array([[0.0, 0.0], [0.0, 2.0], [2.0, 0.0]])
    return LabeledEmbeddingSet.from_labels(Geometry.euclidean(2), rows, PAIRS_2X2[:3], space_2x2)


def random_tangent(g: Geometry, mu: np.ndarray, rng, norms: np.ndarray) -> np.ndarray:
    """Tangent vectors at mu (one per row) with the requested Riemannian norms."""
    w = g.to_tangent(mu, rng.normal(size=mu.shape))
    return w / g.norm(w)[:, None] * norms[:, None]


def random_points(g: Geometry, n: int, rng, scale: float = 1.0) -> np.ndarray:
    if g.kind.value == "lorentz":
        return g.project(scale * rng.normal(size=(n, g.ambient_dim)))
    return g.project(rng.normal(size=(n, g.ambient_dim)))
