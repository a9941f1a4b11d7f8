import numpy as np
import pytest
from numpy.testing import assert_allclose

from src import karcher
from src.errors import ConfigError, DegenerateInput
from src.karcher import MeanConfig, init_guess, intrinsic_mean, mean_objective, normalize_weights, tangent_mean
from src.manifold import Geometry, ManifoldPoint
from tests.conftest import random_tangent

TIGHT = MeanConfig(tolerance=1e-12, max_iters=5000)


def sphere_cloud(rng, n, radius, dim=3):
    """n points within `radius` of a random center on the sphere."""
    g = Geometry.sphere(dim)
    center = g.project(rng.normal(size=(1, dim)))
    centers = np.repeat(center, n, axis=0)
    v = random_tangent(g, centers, rng, rng.uniform(0, radius, size=n))
    return g, g.exp(centers, v)


class TestInitGuess:
    def test_single_point(self):
        g = Geometry.sphere(3)
        p = ManifoldPoint(np.array([0.0, 0.6, 0.8]), g)
        assert_allclose(init_guess([p], [1.0]).coords, p.coords)

    def test_sphere_symmetric_pair(self):
        g = Geometry.sphere(3)
        pts = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        assert_allclose(init_guess(pts, "uniform", g).coords, np.array([1, 1, 0]) / np.sqrt(2))

    def test_euclidean_weighted_sum(self):
        g = Geometry.euclidean(2)
        pts = np.array([[0.0, 0], [2, 0], [0, 4]])
        assert_allclose(init_guess(pts, [0.5, 0.25, 0.25], g).coords, [0.5, 1.0])

    def test_antipodal_pair_is_degenerate(self):
        g = Geometry.sphere(3)
        with pytest.raises(DegenerateInput):
            init_guess(np.array([[1.0, 0, 0], [-1.0, 0, 0]]), None, g)


class TestWeights:
    def test_rounding_is_renormalized(self):
        w = normalize_weights([0.5, 0.5 + 5e-7], 2)
        assert w.sum() == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("weights", [[0.6, 0.6], [1.5, -0.5], [1.0], [np.nan, 1.0]])
    def test_invalid_weights(self, weights):
        with pytest.raises(ConfigError):
            normalize_weights(weights, 2)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            MeanConfig(learning_rate=0)
        with pytest.raises(ConfigError):
            MeanConfig(max_iters=0)


class TestIntrinsicMean:
    def test_single_point_fixed(self):
        g = Geometry.sphere(3)
        p = np.array([[0.0, 0.6, 0.8]])
        result = intrinsic_mean(p, None, None, g)
        assert result.converged
        assert result.iterations == 1
        assert_allclose(result.mean.coords, p[0])

    def test_symmetric_pair_about_mu(self, rng):
        g = Geometry.sphere(3)
        mu = g.project(rng.normal(size=(1, 3)))
        v = random_tangent(g, mu, rng, np.array([0.3]))
        pts = np.vstack([g.exp(mu, v), g.exp(mu, -v)])
        result = intrinsic_mean(pts, None, None, g)
        assert g.dist(result.mean.coords, mu[0]) < 1e-9

    def test_basis_vectors(self):
        g = Geometry.sphere(3)
        result = intrinsic_mean(np.eye(3), None, TIGHT, g)
        assert_allclose(result.mean.coords, np.ones(3) / np.sqrt(3), atol=1e-10)

    def test_euclidean_is_weighted_average(self, rng):
        g = Geometry.euclidean(4)
        pts = rng.normal(size=(50, 4))
        w = rng.random(50)
        w /= w.sum()
        result = intrinsic_mean(pts, w, None, g)
        assert result.iterations == 1
        assert_allclose(result.mean.coords, w @ pts, atol=1e-12)

    def test_stopping_rule_holds_at_result(self, rng):
        g, pts = sphere_cloud(rng, 200, 0.8, dim=10)
        cfg = MeanConfig()
        result = intrinsic_mean(pts, None, cfg, g)
        w = normalize_weights(None, len(pts))
        residual = np.linalg.norm(tangent_mean(g, result.mean.coords, pts, w))
        assert result.converged
        assert result.final_step_norm < cfg.tolerance
        # one more step from a converged iterate is at most as long as the last one
        assert residual < 2 * cfg.tolerance

    def test_objective_does_not_increase(self, rng):
        g, pts = sphere_cloud(rng, 100, 0.9)
        result = intrinsic_mean(pts, None, MeanConfig(tolerance=1e-12, record_trace=True), g)
        trace = np.asarray(result.objective_trace)
        assert len(trace) == result.iterations + 1
        assert np.all(np.diff(trace) <= 1e-14)

    def test_matches_grid_search(self, rng):
        g, pts = sphere_cloud(rng, 20, np.pi / 4)
        w = normalize_weights(None, len(pts))
        mean = intrinsic_mean(pts, w, None, g).mean.coords

        start = init_guess(pts, w, g).coords
        basis = np.linalg.svd(np.eye(3) - np.outer(start, start))[0][:, :2].T
        steps = np.arange(-0.15, 0.15 + 1e-9, 1e-3)
        a, b = np.meshgrid(steps, steps)
        offsets = a.reshape(-1, 1) * basis[0] + b.reshape(-1, 1) * basis[1]
        grid = g.exp(np.broadcast_to(start, offsets.shape), offsets)
        cost = (g.dist(grid[:, None, :], pts[None, :, :]) ** 2) @ w
        best = grid[np.argmin(cost)]
        assert g.dist(mean, best) < 2e-3

    def test_permutation_invariance(self, rng):
        g, pts = sphere_cloud(rng, 60, 1.0, dim=8)
        w = rng.random(60)
        w /= w.sum()
        order = rng.permutation(60)
        a = intrinsic_mean(pts, w, TIGHT, g).mean.coords
        b = intrinsic_mean(pts[order], w[order], TIGHT, g).mean.coords
        assert np.linalg.norm(a - b) < 1e-9

    def test_lorentz_symmetric_pair(self):
        g = Geometry.lorentz(3, curvature=0.7)
        pts = g.project(np.array([[0.4, -0.2, 1.0], [-0.4, 0.2, -1.0]]))
        result = intrinsic_mean(pts, None, TIGHT, g)
        assert_allclose(result.mean.coords, g.project(np.zeros(3)), atol=1e-10)

    def test_non_convergence_is_a_flag(self, rng):
        g, pts = sphere_cloud(rng, 50, 1.0)
        result = intrinsic_mean(pts, None, MeanConfig(learning_rate=0.01, tolerance=1e-12, max_iters=3), g)
        assert not result.converged
        assert result.iterations == 3
        assert any("did not converge" in w for w in result.warnings)

    def test_spread_points_warn(self):
        g = Geometry.sphere(3)
        angle = np.deg2rad(100)
        pts = np.array([[1.0, 0, 0], [np.cos(angle), np.sin(angle), 0]])
        result = intrinsic_mean(pts, [0.1, 0.9], None, g)
        assert result.closeness.within_half_pi is False
        assert any("may not be unique" in w for w in result.warnings)

    def test_subsample_is_deterministic(self, rng):
        g, pts = sphere_cloud(rng, 500, 0.5, dim=5)
        cfg = MeanConfig(subsample=100, seed=3)
        a = intrinsic_mean(pts, None, cfg, g).mean.coords
        b = intrinsic_mean(pts, None, cfg, g).mean.coords
        full = intrinsic_mean(pts, None, None, g).mean.coords
        assert np.array_equal(a, b)
        assert g.dist(a, full) < 0.1


def test_chunked_tangent_mean_matches_direct(rng, monkeypatch):
    g, pts = sphere_cloud(rng, 103, 1.0, dim=6)
    w = normalize_weights(None, len(pts))
    mu = init_guess(pts, w, g).coords
    direct = w @ g.log(mu, pts)
    monkeypatch.setattr(karcher, "CHUNK_ROWS", 10)
    monkeypatch.setattr(karcher, "THREADS", 4)
    assert_allclose(tangent_mean(g, mu, pts, w), direct, atol=1e-12)


def test_objective_is_half_weighted_squared_distance():
    g = Geometry.euclidean(1)
    pts = np.array([[0.0], [2.0]])
    assert mean_objective(g, np.array([1.0]), pts, np.array([0.5, 0.5])) == pytest.approx(0.5)
