import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.decompose import decompose_simple
from src.errors import ConfigError, DivisionByZero, EmptyInput
from src.manifold import Geometry
from src.metrics import (
    ClassifierBank,
    auc_ratio,
    bank_from_anchors,
    bank_from_decomposition,
    czsl_evaluate,
    exact_bias_grid,
    group_evaluate,
    object_bank,
    pareto_auc,
    predict,
)

FLAT = Geometry.euclidean(2)


@pytest.fixture
def toy():
    """Seen candidate s, unseen candidate u, two queries of each."""
    bank = bank_from_anchors(FLAT, {("s",): [1.0, 0.0], ("u",): [0.0, 1.0]})
    queries = np.array([[0.9, 0.2], [0.4, 0.5], [0.3, 0.6], [0.7, 0.1]])
    labels = [("s",), ("s",), ("u",), ("u",)]
    return bank, queries, labels, {("s",)}


def brute_force_curve(bank, queries, labels, seen, biases):
    seen_mask = np.array([z in seen for z in labels])
    points = []
    for b in biases:
        correct = np.array([p == t for p, t in zip(predict(bank, queries, b, seen).labels, labels)])
        points.append((correct[seen_mask].mean(), correct[~seen_mask].mean()))
    return np.array(points)


class TestPredict:
    def test_single_candidate(self):
        bank = bank_from_anchors(FLAT, {("only",): [1.0, 0.0]})
        assert predict(bank, np.array([[0.0, 1.0], [-3.0, 2.0]])).labels == [("only",), ("only",)]

    def test_query_on_an_anchor(self, rng):
        g = Geometry.sphere(5)
        anchors = g.project(rng.normal(size=(4, 5)))
        bank = ClassifierBank(g, ("w", "x", "y", "z"), anchors)
        assert predict(bank, anchors[2:3]).labels == [("y",)]

    def test_bias_lets_unseen_win(self):
        bank = bank_from_anchors(FLAT, {("seen",): [0.6, 0.0], ("unseen",): [0.55, 0.0]})
        query = np.array([[1.0, 0.0]])
        assert predict(bank, query, 0.0, {("seen",)}).labels == [("seen",)]
        assert predict(bank, query, 0.1, {("seen",)}).labels == [("unseen",)]

    def test_ties_go_to_smallest_label(self):
        bank = bank_from_anchors(FLAT, {("b",): [1.0, 0.0], ("a",): [1.0, 0.0]})
        assert bank.labels == (("a",), ("b",))
        assert predict(bank, np.array([[1.0, 1.0]])).labels == [("a",)]

    def test_constant_shift_keeps_predictions(self, rng):
        bank = bank_from_anchors(FLAT, {("a",): [1.0, 0.0], ("b",): [0.0, 1.0], ("c",): [-1.0, 0.5]})
        queries = rng.normal(size=(20, 2))
        scores = bank.scores(queries)
        assert np.array_equal(np.argmax(scores, axis=1), np.argmax(scores + 7.5, axis=1))
        assert np.array_equal(predict(bank, queries).indices, np.argmax(scores, axis=1))

    def test_query_scale_keeps_sphere_predictions(self, rng):
        g = Geometry.sphere(4)
        bank = ClassifierBank(g, ("a", "b", "c"), g.project(rng.normal(size=(3, 4))))
        raw = rng.normal(size=(30, 4))
        a = predict(bank, g.project(raw)).labels
        b = predict(bank, g.project(12.5 * raw)).labels
        assert a == b

    def test_lorentz_scores_are_negative_distances(self, rng):
        g = Geometry.lorentz(3)
        anchors = g.project(rng.normal(size=(3, 3)))
        bank = ClassifierBank(g, ("a", "b", "c"), anchors)
        assert predict(bank, anchors[1:2]).labels == [("b",)]
        assert_allclose(bank.scores(anchors[:1])[0, 0], 0.0, atol=1e-6)

    def test_empty_bank(self):
        with pytest.raises(EmptyInput):
            bank_from_anchors(FLAT, {})


class TestCZSL:
    def test_perfect_scorer(self):
        g = Geometry.sphere(4)
        labels = [("a1", "o1"), ("a1", "o2"), ("a2", "o1"), ("a2", "o2")]
        anchors = np.eye(4)
        bank = ClassifierBank(g, tuple(labels), anchors)
        report = czsl_evaluate(bank, anchors, labels, labels[:2])
        assert (report.attr_acc, report.obj_acc) == (1.0, 1.0)
        assert (report.best_seen, report.best_unseen, report.best_hm) == (1.0, 1.0, 1.0)
        assert report.auc == pytest.approx(1.0)

    def test_toy_case_by_hand(self, toy):
        bank, queries, labels, seen = toy
        report = czsl_evaluate(bank, queries, labels, seen)
        assert report.best_seen == 1.0
        assert report.best_unseen == 1.0
        assert report.best_hm == pytest.approx(2 / 3)
        assert report.auc == pytest.approx(0.875)
        assert report.attr_acc == report.obj_acc == 0.5

    def test_curve_matches_predict(self, toy):
        bank, queries, labels, seen = toy
        report = czsl_evaluate(bank, queries, labels, seen)
        biases = [b for b, _, _ in report.curve]
        expected = brute_force_curve(bank, queries, labels, seen, biases)
        assert_allclose([(s, u) for _, s, u in report.curve], expected)

    def test_denser_grid_changes_nothing(self, toy, rng):
        bank, queries, labels, seen = toy
        exact = czsl_evaluate(bank, queries, labels, seen)
        grid = np.concatenate([[b for b, _, _ in exact.curve], np.linspace(-2, 2, 4001), rng.uniform(-1, 1, 500)])
        dense = czsl_evaluate(bank, queries, labels, seen, bias_grid=grid)
        for name in ("best_seen", "best_unseen", "best_hm", "auc"):
            assert getattr(dense, name) == pytest.approx(getattr(exact, name))

    def test_random_cases_match_brute_force(self, rng):
        for _ in range(10):
            names = [(f"c{i}",) for i in range(5)]
            anchors = rng.normal(size=(5, 3))
            bank = ClassifierBank(Geometry.euclidean(3), tuple(names), anchors)
            queries = rng.normal(size=(12, 3))
            labels = [names[i] for i in rng.integers(0, 5, size=12)]
            labels[0], labels[1] = names[0], names[4]
            seen = set(names[:2])
            report = czsl_evaluate(bank, queries, labels, seen)
            biases = np.linspace(-50, 50, 2001)
            points = brute_force_curve(bank, queries, labels, seen, biases)
            assert report.best_seen == pytest.approx(points[:, 0].max())
            assert report.best_unseen == pytest.approx(points[:, 1].max())
            assert report.auc >= pareto_auc(points[:, 0], points[:, 1]) - 1e-12
            assert 0.0 <= report.auc <= 1.0

    def test_uniform_grid(self, toy):
        bank, queries, labels, seen = toy
        report = czsl_evaluate(bank, queries, labels, seen, bias_grid="uniform")
        assert report.diagnostics["bias_grid"] == "uniform"
        assert report.diagnostics["grid_size"] <= 203
        assert 0.0 <= report.auc <= 0.875 + 1e-12

    @pytest.mark.parametrize("grid", ["fancy", []])
    def test_bad_grid(self, toy, grid):
        bank, queries, labels, seen = toy
        with pytest.raises(ConfigError):
            czsl_evaluate(bank, queries, labels, seen, bias_grid=grid)

    def test_no_unseen_queries(self, toy):
        bank, queries, labels, seen = toy
        report = czsl_evaluate(bank, queries[:2], labels[:2], seen)
        assert report.diagnostics["degenerate_split"] == "no unseen queries"
        assert np.isnan(report.best_unseen)
        assert np.isnan(report.auc)
        assert np.isnan(report.best_hm)

    def test_closed_world_is_at_least_open_world(self, euclid_2x2):
        dec = decompose_simple(euclid_2x2)
        rng = np.random.default_rng(5)
        queries = rng.normal(size=(40, 2)) + 1.0
        truth = [("a1", "o1")] * 20 + [("a2", "o2")] * 20
        closed = bank_from_decomposition(dec, [("a1", "o1"), ("a2", "o2")])
        open_ = bank_from_decomposition(dec)
        acc = [np.mean([p == t for p, t in zip(predict(b, queries).labels, truth)]) for b in (closed, open_)]
        assert acc[0] >= acc[1]
        assert len(open_) == 4

    def test_single_point_curve(self):
        assert pareto_auc(np.array([0.6]), np.array([0.5])) == pytest.approx(0.3)

    def test_exact_grid_has_sentinels(self):
        grid = exact_bias_grid(np.array([1.0, 0.5]), np.array([0.0, 0.5]))
        assert_allclose(grid, [-1.0, 0.0, 0.5, 1.0, 2.0])


class TestAUCRatio:
    def test_values(self):
        assert auc_ratio(13.9, 4.4) == pytest.approx(315.909, abs=1e-3)
        assert auc_ratio(4.4, 4.4) == pytest.approx(100.0)
        assert auc_ratio(2.2, 4.4) == pytest.approx(50.0)

    def test_zero_baseline(self):
        with pytest.raises(DivisionByZero) as err:
            auc_ratio(1.0, 0.0)
        assert err.value.code == "division_by_zero"

    def test_negative_baseline(self):
        with pytest.raises(ConfigError):
            auc_ratio(1.0, -2.0)


class TestGroups:
    BANK = bank_from_anchors(FLAT, {("x",): [1.0, 0.0], ("y",): [0.0, 1.0]})

    def test_all_correct(self):
        queries = np.array([[1.0, 0.0], [0.0, 1.0]])
        report = group_evaluate(self.BANK, queries, ["x", "y"], ["g1", "g2"])
        assert (report.worst_group, report.avg, report.gap) == (1.0, 1.0, 0.0)

    def test_one_group_half_right(self):
        queries = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        labels = ["x", "y", "x", "x", "y"]
        groups = ["g1", "g2", "g3", "g4", "g4"]
        report = group_evaluate(self.BANK, queries, labels, groups, declared_groups=["g1", "g2", "g3", "g4", "g5"])
        assert report.worst_group == 0.5
        assert report.avg == pytest.approx(0.875)
        assert report.gap == report.avg - report.worst_group
        assert report.gap == pytest.approx(0.375)
        assert report.sample_avg == pytest.approx(0.8)
        assert report.per_group == {"g1": 1.0, "g2": 1.0, "g3": 1.0, "g4": 0.5}
        assert report.diagnostics["empty_groups"] == ["g5"]

    def test_object_bank_from_decomposition(self, euclid_2x2):
        dec = decompose_simple(euclid_2x2)
        bank = object_bank(dec)
        assert bank.labels == (("o1",), ("o2",))
        assert_allclose(bank.anchors, [[1.0, 0.0], [1.0, 2.0]], atol=1e-14)

    def test_mismatched_lengths(self):
        with pytest.raises(ConfigError):
            group_evaluate(self.BANK, np.zeros((2, 2)), ["x", "y"], ["g1"])
