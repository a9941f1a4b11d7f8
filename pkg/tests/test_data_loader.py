import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.data_loader import (
    HEADER,
    EmbeddingMatrix,
    load_labeled_set,
    parse_embeddings,
    read_anchor_bank,
    read_decomposition,
    read_embeddings,
    read_labels,
    read_space,
    read_split,
    read_weights,
    write_decomposition,
    write_embeddings,
    write_labels,
    write_report,
    write_space,
)
from src.decompose import decompose_simple, decompose_sparse
from src.errors import (
    AlignmentError,
    DataError,
    EmptyInput,
    FormatError,
    TruncationError,
    UnknownPrimitive,
)
from src.manifold import Geometry, GeometryKind

from tests.conftest import PAIRS_2X2


def write_tsv(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestEmbeddingFiles:
    def test_header_layout(self, tmp_path):
        path = tmp_path / "x.gde"
        write_embeddings(path, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), Geometry.sphere(3))
        data = path.read_bytes()
        assert data[:4] == b"GDE1"
        assert HEADER.unpack_from(data)[1:] == (0, 2, 3)
        assert len(data) == HEADER.size + 4 * 2 * 3

    def test_rewrite_gives_identical_bytes(self, tmp_path, rng):
        g = Geometry.sphere(7)
        first, second = tmp_path / "a.gde", tmp_path / "b.gde"
        write_embeddings(first, g.project(rng.normal(size=(5, 7))), g)
        write_embeddings(second, read_embeddings(first))
        assert first.read_bytes() == second.read_bytes()

    def test_values_are_promoted_without_rounding(self, tmp_path, rng):
        values = rng.normal(size=(4, 3)).astype(np.float32)
        path = tmp_path / "e.gde"
        write_embeddings(path, values.astype(np.float64), Geometry.euclidean(3))
        emb = read_embeddings(path)
        assert emb.values.dtype == np.float64
        assert np.array_equal(emb.values, values.astype(np.float64))

    def test_lorentz_drops_and_relifts_time(self, tmp_path, rng):
        g = Geometry.lorentz(4, 2.0)
        points = g.project(rng.normal(size=(3, 4)))
        path = tmp_path / "h.gde"
        write_embeddings(path, points, g)
        assert HEADER.unpack_from(path.read_bytes())[1:] == (1, 3, 4)
        emb = read_embeddings(path, curvature=2.0)
        assert emb.geometry == g
        assert_allclose(emb.points(), points, rtol=1e-6, atol=1e-6)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.gde"
        write_embeddings(path, np.eye(3), Geometry.euclidean(3))
        data = path.read_bytes()
        with pytest.raises(TruncationError) as err:
            parse_embeddings(data[:-1])
        assert err.value.context == {"expected": len(data), "got": len(data) - 1}
        with pytest.raises(TruncationError):
            parse_embeddings(data + b"\x00")
        with pytest.raises(TruncationError):
            parse_embeddings(data[:6])

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            parse_embeddings(b"GDE2" + HEADER.pack(b"GDE1", 0, 1, 1)[4:] + b"\x00" * 4)
        with pytest.raises(FormatError):
            parse_embeddings(b"")

    def test_unknown_kind_byte(self):
        with pytest.raises(FormatError):
            parse_embeddings(HEADER.pack(b"GDE1", 7, 1, 1) + b"\x00" * 4)

    def test_zero_rows(self):
        with pytest.raises(EmptyInput):
            parse_embeddings(HEADER.pack(b"GDE1", 2, 0, 3))

    def test_non_finite_rows(self, tmp_path):
        payload = np.array([[1.0, 2.0], [np.nan, 0.0]], dtype="<f4").tobytes()
        with pytest.raises(DataError) as err:
            parse_embeddings(HEADER.pack(b"GDE1", 2, 2, 2) + payload)
        assert err.value.context["row"] == 1
        with pytest.raises(DataError):
            write_embeddings(tmp_path / "n.gde", np.array([[np.inf, 0.0]]), Geometry.euclidean(2))

    def test_raw_write_needs_geometry(self, tmp_path):
        with pytest.raises(FormatError):
            write_embeddings(tmp_path / "g.gde", np.eye(2))

    def test_embedding_matrix_points(self):
        emb = EmbeddingMatrix(Geometry.sphere(2), np.array([[3.0, 4.0]]))
        assert_allclose(emb.points(), [[0.6, 0.8]])


class TestLabels:
    def test_inferred_space_sorts_primitives(self, tmp_path):
        path = write_tsv(tmp_path / "l.tsv", ["sample_id\tattr\tobj", "s1\twet\tdog", "s2\tdry\tcat", "s3\twet\tcat"])
        table = read_labels(path)
        assert table.sample_ids == ("s1", "s2", "s3")
        assert table.labels == [("wet", "dog"), ("dry", "cat"), ("wet", "cat")]
        assert table.space.factors[0].primitives == ("dry", "wet")
        assert table.space.factors[1].primitives == ("cat", "dog")

    def test_unknown_primitive_reports_line(self, tmp_path, space_2x2):
        path = write_tsv(tmp_path / "l.tsv", ["sample_id\tattr\tobj", "s1\ta1\to1", "s2\ta3\to1"])
        with pytest.raises(UnknownPrimitive) as err:
            read_labels(path, space_2x2)
        assert err.value.context == {"line": 3, "factor": "attr", "primitive": "a3"}

    def test_bad_header(self, tmp_path):
        with pytest.raises(FormatError):
            read_labels(write_tsv(tmp_path / "l.tsv", ["id\tattr", "s1\ta1"]))
        with pytest.raises(FormatError):
            read_labels(write_tsv(tmp_path / "m.tsv", ["sample_id", "s1"]))

    def test_empty_field(self, tmp_path):
        path = write_tsv(tmp_path / "l.tsv", ["sample_id\tattr\tobj", "s1\ta1\to1", "s2\t \to2"])
        with pytest.raises(FormatError) as err:
            read_labels(path)
        assert err.value.context == {"line": 3, "column": "attr"}

    def test_short_row(self, tmp_path, space_2x2):
        path = write_tsv(tmp_path / "l.tsv", ["sample_id\tattr\tobj", "s1\ta1\to1", "s2\ta2"])
        with pytest.raises(FormatError) as err:
            read_labels(path, space_2x2)
        assert err.value.context["line"] == 3
        assert err.value.context["column"] == "obj"

    def test_header_only(self, tmp_path):
        with pytest.raises(EmptyInput):
            read_labels(write_tsv(tmp_path / "l.tsv", ["sample_id\tattr"]))

    def test_column_count_must_match_space(self, tmp_path, space_2x2):
        with pytest.raises(FormatError):
            read_labels(write_tsv(tmp_path / "l.tsv", ["sample_id\tattr", "s1\ta1"]), space_2x2)

    def test_columns_follow_space_order(self, tmp_path, space_2x2):
        path = write_tsv(tmp_path / "l.tsv", ["sample_id\tobj\tattr", "s1\to2\ta1"])
        assert read_labels(path, space_2x2).labels == [("a1", "o2")]

    def test_write_then_read(self, tmp_path, space_2x2):
        path = tmp_path / "l.tsv"
        write_labels(path, ["x", "y", "z", "w"], PAIRS_2X2, space_2x2)
        assert path.read_text().splitlines()[:2] == ["sample_id\tattr\tobj", "x\ta1\to1"]
        table = read_labels(path, space_2x2)
        assert table.labels == PAIRS_2X2


class TestLabeledSets:
    def test_load(self, tmp_path, euclid_2x2):
        write_embeddings(tmp_path / "e.gde", euclid_2x2.rows, euclid_2x2.geometry)
        write_labels(tmp_path / "l.tsv", euclid_2x2.sample_ids, euclid_2x2.labels, euclid_2x2.space)
        data = load_labeled_set(tmp_path / "e.gde", tmp_path / "l.tsv", euclid_2x2.space)
        assert np.array_equal(data.rows, euclid_2x2.rows)
        assert data.labels == PAIRS_2X2

    def test_geometry_override(self, tmp_path, euclid_2x2):
        rows = np.array([[1.0, 0.0], [0.0, 3.0], [2.0, 0.0], [1.0, 1.0]])
        write_embeddings(tmp_path / "e.gde", rows, Geometry.euclidean(2))
        write_labels(tmp_path / "l.tsv", euclid_2x2.sample_ids, PAIRS_2X2, euclid_2x2.space)
        data = load_labeled_set(tmp_path / "e.gde", tmp_path / "l.tsv", geometry=Geometry.sphere(2))
        assert data.geometry.kind is GeometryKind.SPHERE
        assert_allclose(np.linalg.norm(data.rows, axis=1), 1.0)

    def test_alignment(self, tmp_path, euclid_2x2):
        write_embeddings(tmp_path / "e.gde", euclid_2x2.rows[:3], euclid_2x2.geometry)
        write_labels(tmp_path / "l.tsv", euclid_2x2.sample_ids, PAIRS_2X2, euclid_2x2.space)
        with pytest.raises(AlignmentError) as err:
            load_labeled_set(tmp_path / "e.gde", tmp_path / "l.tsv")
        assert err.value.context == {"embeddings": 3, "labels": 4}

    def test_anchor_bank(self, tmp_path, space_2x2):
        g = Geometry.sphere(3)
        write_embeddings(tmp_path / "a.gde", np.eye(3)[:2], g)
        write_labels(tmp_path / "a.tsv", ["p", "q"], PAIRS_2X2[:2], space_2x2)
        geometry, anchors = read_anchor_bank(tmp_path / "a.gde", tmp_path / "a.tsv", space_2x2)
        assert geometry == g
        assert_allclose(anchors[("a1", "o2")].coords, [0.0, 1.0, 0.0])

        write_labels(tmp_path / "b.tsv", ["p", "q"], [PAIRS_2X2[0]] * 2, space_2x2)
        with pytest.raises(FormatError):
            read_anchor_bank(tmp_path / "a.gde", tmp_path / "b.tsv", space_2x2)


class TestSpacesAndSplits:
    def test_space_file(self, tmp_path, space_2x2):
        write_space(tmp_path / "s.json", space_2x2)
        assert read_space(tmp_path / "s.json") == space_2x2

    def test_invalid_json(self, tmp_path):
        (tmp_path / "s.json").write_text("{\"factors\": [", encoding="utf-8")
        with pytest.raises(FormatError):
            read_space(tmp_path / "s.json")

    def test_split(self, tmp_path, space_2x2):
        (tmp_path / "split.json").write_text(json.dumps({
            "seen_pairs": [["a1", "o1"], ["a2", "o2"]],
            "test_pairs": [["a2", "o2"], ["a1", "o2"]],
            "groups": {"s1": "g1"},
        }))
        split = read_split(tmp_path / "split.json", space_2x2)
        assert split.seen_pairs == {("a1", "o1"), ("a2", "o2")}
        assert split.candidates(space_2x2) == [("a1", "o2"), ("a2", "o2")]
        assert split.groups == {"s1": "g1"}
        assert not split.open_world

    def test_split_candidates_without_test_pairs(self, tmp_path, space_2x2):
        (tmp_path / "split.json").write_text(json.dumps({"seen_pairs": [["a1", "o1"]]}))
        split = read_split(tmp_path / "split.json", space_2x2)
        assert split.candidates(space_2x2, [("a2", "o1")]) == [("a1", "o1"), ("a2", "o1")]

        (tmp_path / "open.json").write_text(json.dumps({"seen_pairs": [["a1", "o1"]], "open_world": True}))
        assert len(read_split(tmp_path / "open.json", space_2x2).candidates(space_2x2)) == 4

    def test_split_errors(self, tmp_path, space_2x2):
        (tmp_path / "a.json").write_text(json.dumps({"test_pairs": []}))
        with pytest.raises(FormatError):
            read_split(tmp_path / "a.json", space_2x2)
        (tmp_path / "b.json").write_text(json.dumps({"seen_pairs": [["a1", "o9"]]}))
        with pytest.raises(UnknownPrimitive):
            read_split(tmp_path / "b.json", space_2x2)


class TestDecompositionFiles:
    def test_round_trip(self, tmp_path, euclid_2x2):
        dec = decompose_simple(euclid_2x2)
        write_decomposition(tmp_path / "d.json", dec)
        back = read_decomposition(tmp_path / "d.json")
        assert back.geometry == dec.geometry
        assert back.space == dec.space
        assert back.seen == dec.seen
        assert np.array_equal(back.mu.coords, dec.mu.coords)
        assert np.array_equal(back.directions, dec.directions)
        assert np.array_equal(back.denoised, dec.denoised)

    def test_rewrite_gives_identical_text(self, tmp_path, euclid_sparse):
        dec = decompose_sparse(euclid_sparse)
        write_decomposition(tmp_path / "a.json", dec)
        write_decomposition(tmp_path / "b.json", read_decomposition(tmp_path / "a.json"))
        assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()

    def test_not_a_decomposition(self, tmp_path):
        (tmp_path / "d.json").write_text(json.dumps({"format": "something-else"}))
        with pytest.raises(FormatError):
            read_decomposition(tmp_path / "d.json")

    def test_truncated_block(self, tmp_path, euclid_2x2):
        write_decomposition(tmp_path / "d.json", decompose_simple(euclid_2x2))
        data = json.loads((tmp_path / "d.json").read_text())
        data["directions"]["shape"] = [5, 2]
        (tmp_path / "d.json").write_text(json.dumps(data))
        with pytest.raises(TruncationError):
            read_decomposition(tmp_path / "d.json")


class TestReportsAndWeights:
    def test_report_floats(self, tmp_path):
        text = write_report({"gap": 0.375, "avg": float("nan"), "n": 3}, tmp_path / "r.json")
        assert '"gap": 0.375000' in text
        assert '"avg": null' in text
        assert (tmp_path / "r.json").read_text() == text

    def test_weights(self, tmp_path):
        (tmp_path / "w.txt").write_text("0.25 0.25\n0.5\n")
        assert_allclose(read_weights(tmp_path / "w.txt"), [0.25, 0.25, 0.5])
        (tmp_path / "bad.txt").write_text("0.5 half\n")
        with pytest.raises(FormatError):
            read_weights(tmp_path / "bad.txt")
