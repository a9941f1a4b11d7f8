"""
Data loading and persistence for geodecomp.
GDE1 binary embedding files, label TSVs, composition spaces, split files,
decomposition files and reports.
"""
import base64
import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import pandas as pd

from config.config import DEFAULT_CURVATURE
from src.decompose import CompositionSpace, Decomposition, LabeledEmbeddingSet
from src.errors import (
    AlignmentError,
    DataError,
    EmptyInput,
    FormatError,
    TruncationError,
    UnknownPrimitive,
)
from src.manifold import Geometry, GeometryKind, ManifoldPoint
from src.report_generator import canonical_json
from src.utils import PathLike, atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

MAGIC = b"GDE1"
HEADER = struct.Struct("<4sBII")
KIND_CODES = {GeometryKind.SPHERE: 0, GeometryKind.LORENTZ: 1, GeometryKind.EUCLIDEAN: 2}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
FLOAT32 = np.dtype("<f4")

DECOMPOSITION_FORMAT = "geodecomp-decomposition"
DECOMPOSITION_VERSION = 1


# =============================================================================
# Embedding files
# =============================================================================
@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """
    Stored values of an embedding file, promoted to float64 without rounding.
    Lorentz files hold spatial coordinates only; `points()` re-lifts them.
    """

    geometry: Geometry
    values: np.ndarray

    def points(self) -> np.ndarray:
        """Rows re-projected onto the geometry."""
        return self.geometry.project(self.values)


def write_embeddings(path: PathLike, matrix: Union[np.ndarray, EmbeddingMatrix], geometry: Optional[Geometry] = None) -> None:
    """Write a GDE1 file; Lorentz points drop their time coordinate."""
    if isinstance(matrix, EmbeddingMatrix):
        geometry, values = matrix.geometry, matrix.values
    else:
        if geometry is None:
            raise FormatError("a geometry is required to write raw embeddings")
        values = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        if geometry.kind is GeometryKind.LORENTZ and values.shape[1] == geometry.coord_dim:
            values = values[:, 1:]
    if values.shape[0] == 0:
        raise EmptyInput("no rows to write")
    bad = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if bad.size:
        raise DataError(f"row {int(bad[0])} has non-finite values", {"row": int(bad[0])})
    n, d = values.shape
    payload = values.astype(FLOAT32).tobytes(order="C")
    atomic_write_bytes(path, HEADER.pack(MAGIC, KIND_CODES[geometry.kind], n, d) + payload)


def parse_embeddings(data: bytes, curvature: float = DEFAULT_CURVATURE) -> EmbeddingMatrix:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a GDE1 embedding file (bad magic)")
    if len(data) < HEADER.size:
        raise TruncationError(f"header needs {HEADER.size} bytes, file has {len(data)}")
    _, kind, n, d = HEADER.unpack_from(data)
    if kind not in CODE_KINDS:
        raise FormatError(f"unknown geometry kind byte {kind}", {"kind": kind})
    if n == 0:
        raise EmptyInput("embedding file has no rows")
    if d == 0:
        raise FormatError("embedding file declares zero dimensions")
    expected = HEADER.size + 4 * n * d
    if len(data) != expected:
        raise TruncationError(
            f"expected {expected} bytes for {n}x{d} embeddings, got {len(data)}",
            {"expected": expected, "got": len(data)},
        )
    values = np.frombuffer(data, dtype=FLOAT32, offset=HEADER.size).reshape(n, d).astype(np.float64)
    bad = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if bad.size:
        raise DataError(f"row {int(bad[0])} has NaN or infinite values", {"row": int(bad[0])})
    geometry = Geometry(CODE_KINDS[kind], d, curvature if CODE_KINDS[kind] is GeometryKind.LORENTZ else 1.0)
    return EmbeddingMatrix(geometry, values)


def read_embeddings(path: PathLike, curvature: float = DEFAULT_CURVATURE) -> EmbeddingMatrix:
    return parse_embeddings(Path(path).read_bytes(), curvature)


# =============================================================================
# Labels and composition spaces
# =============================================================================
@dataclass(frozen=True)
class LabelTable:
    sample_ids: tuple
    labels: list
    factor_names: tuple
    space: CompositionSpace


def read_labels(path: PathLike, space: Optional[CompositionSpace] = None) -> LabelTable:
    """
    Read a `sample_id<TAB>factor...` TSV.
    Without a space, one is inferred from the labels (primitives sorted per factor).
    """
    try:
        df = pd.read_csv(
            path, sep="\t", dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE, encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise FormatError(f"label file {path} is empty")
    except pd.errors.ParserError as e:
        raise FormatError(f"malformed label file {path}: {e}")
    columns = [c.strip() for c in df.columns]
    if len(columns) < 2 or columns[0] != "sample_id":
        raise FormatError("label header must be sample_id<TAB>factor_1<TAB>...", {"header": columns})
    factors = columns[1:]
    df.columns = columns
    if df.empty:
        raise EmptyInput(f"label file {path} has no rows")

    # short rows come back padded with NaN
    short = df.isna().to_numpy()
    if short.any():
        row, col = map(int, np.argwhere(short)[0])
        raise FormatError(
            f"line {row + 2} has {col} field(s), the header has {len(columns)}",
            {"line": row + 2, "column": columns[col], "fields": col, "expected": len(columns)},
        )

    empty = df.apply(lambda col: col.str.strip() == "").to_numpy()
    if empty.any():
        row, col = map(int, np.argwhere(empty)[0])
        raise FormatError(
            f"empty field '{columns[col]}' on line {row + 2}",
            {"line": row + 2, "column": columns[col]},
        )

    if space is None:
        space = CompositionSpace([(f, sorted(df[f].unique())) for f in factors])
    elif len(factors) != space.n_factors:
        raise FormatError(
            f"label file has {len(factors)} factor columns, the space has {space.n_factors}",
            {"columns": factors},
        )
    elif set(factors) == {f.name for f in space.factors}:
        factors = [f.name for f in space.factors]

    labels = list(df[factors].itertuples(index=False, name=None))
    for i, z in enumerate(labels):
        for j, name in enumerate(z):
            if name not in space.factors[j].primitives:
                raise UnknownPrimitive(
                    f"unknown primitive '{name}' for factor '{space.factors[j].name}' on line {i + 2}",
                    {"line": i + 2, "factor": space.factors[j].name, "primitive": name},
                )
    return LabelTable(tuple(df["sample_id"]), labels, tuple(factors), space)


def write_labels(path: PathLike, sample_ids: Sequence[str], labels: Sequence[Sequence[str]], space: CompositionSpace) -> None:
    df = pd.DataFrame(list(labels), columns=[f.name for f in space.factors])
    df.insert(0, "sample_id", list(sample_ids))
    atomic_write_text(path, df.to_csv(sep="\t", index=False, lineterminator="\n", quoting=csv.QUOTE_NONE))


def read_space(path: PathLike) -> CompositionSpace:
    return CompositionSpace.from_dict(_read_json(path))


def write_space(path: PathLike, space: CompositionSpace) -> None:
    atomic_write_text(path, canonical_json(space.to_dict()))


def load_labeled_set(
    embeddings_path: PathLike,
    labels_path: PathLike,
    space: Optional[CompositionSpace] = None,
    curvature: float = DEFAULT_CURVATURE,
    geometry: Optional[Geometry] = None,
) -> LabeledEmbeddingSet:
    """Embedding file plus its label file; `geometry` reinterprets the stored rows."""
    emb = read_embeddings(embeddings_path, curvature)
    table = read_labels(labels_path, space)
    if len(table.labels) != emb.values.shape[0]:
        raise AlignmentError(
            f"{emb.values.shape[0]} embedding rows but {len(table.labels)} label rows",
            {"embeddings": int(emb.values.shape[0]), "labels": len(table.labels)},
        )
    g = geometry or emb.geometry
    rows = g.project(emb.values) if g.kind is not GeometryKind.EUCLIDEAN else emb.values
    return LabeledEmbeddingSet.from_labels(g, rows, table.labels, table.space, table.sample_ids)


def read_anchor_bank(
    embeddings_path: PathLike,
    labels_path: PathLike,
    space: CompositionSpace,
    curvature: float = DEFAULT_CURVATURE,
) -> tuple[Geometry, dict]:
    """One anchor embedding per tuple -> (geometry, {tuple: point})."""
    emb = read_embeddings(embeddings_path, curvature)
    table = read_labels(labels_path, space)
    if len(table.labels) != emb.values.shape[0]:
        raise AlignmentError(
            f"{emb.values.shape[0]} anchor rows but {len(table.labels)} label rows",
            {"embeddings": int(emb.values.shape[0]), "labels": len(table.labels)},
        )
    if len(set(table.labels)) != len(table.labels):
        raise FormatError("anchor labels repeat a tuple")
    points = emb.points()
    return emb.geometry, {z: ManifoldPoint(p, emb.geometry) for z, p in zip(table.labels, points)}


# =============================================================================
# Splits
# =============================================================================
@dataclass(frozen=True)
class Split:
    seen_pairs: frozenset
    test_pairs: Optional[tuple] = None
    open_world: bool = False
    groups: dict = field(default_factory=dict)

    def candidates(self, space: CompositionSpace, test_labels: Sequence[tuple] = ()) -> list:
        """Candidate tuples: all of the space in the open world, else test_pairs (or seen plus test labels)."""
        if self.open_world:
            return list(space.tuples())
        if self.test_pairs is not None:
            return sorted(set(self.test_pairs))
        return sorted(self.seen_pairs | set(map(tuple, test_labels)))


def read_split(path: PathLike, space: CompositionSpace) -> Split:
    data = _read_json(path)
    if not isinstance(data, dict) or "seen_pairs" not in data:
        raise FormatError("split file needs a 'seen_pairs' list")

    def pairs(key: str) -> list:
        out = []
        for z in data.get(key) or []:
            z = tuple(str(v) for v in z)
            space.encode(z)
            out.append(z)
        return out

    test = pairs("test_pairs") if "test_pairs" in data else None
    groups = data.get("groups") or {}
    if not isinstance(groups, dict):
        raise FormatError("'groups' must map sample ids to group names")
    return Split(
        seen_pairs=frozenset(pairs("seen_pairs")),
        test_pairs=tuple(test) if test is not None else None,
        open_world=bool(data.get("open_world", False)),
        groups={str(k): str(v) for k, v in groups.items()},
    )


# =============================================================================
# Decompositions
# =============================================================================
def _encode_block(matrix: np.ndarray) -> dict:
    matrix = np.asarray(matrix, dtype=np.float64)
    return {
        "shape": list(matrix.shape),
        "data": base64.b64encode(matrix.astype(FLOAT32).tobytes(order="C")).decode("ascii"),
    }


def _decode_block(block: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in block["shape"])
        raw = base64.b64decode(block["data"], validate=True)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed array block: {e}")
    if len(raw) != 4 * int(np.prod(shape)):
        raise TruncationError(f"array block of shape {shape} has {len(raw)} bytes")
    return np.frombuffer(raw, dtype=FLOAT32).reshape(shape).astype(np.float64)


def decomposition_to_dict(dec: Decomposition) -> dict:
    space = dec.space
    return {
        "format": DECOMPOSITION_FORMAT,
        "version": DECOMPOSITION_VERSION,
        "geometry": dec.geometry.to_dict(),
        "space": space.to_dict(),
        "seen": [list(space.decode(c)) for c in space.tuple_codes(list(dec.seen_ids))],
        "temperature": dec.diagnostics.get("noise", {}).get("temperature"),
        "diagnostics": dec.diagnostics,
        "mu": _encode_block(dec.mu.coords),
        "directions": _encode_block(dec.directions),
        "denoised": _encode_block(dec.denoised) if dec.denoised.size else None,
    }


def decomposition_from_dict(data: dict) -> Decomposition:
    if data.get("format") != DECOMPOSITION_FORMAT:
        raise FormatError("not a decomposition file")
    try:
        g = Geometry(data["geometry"]["kind"], data["geometry"]["ambient_dim"], data["geometry"]["curvature"])
        space = CompositionSpace.from_dict(data["space"])
        seen = [space.tuple_id(z) for z in data["seen"]]
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed decomposition file: {e}")
    mu = g.project(_decode_block(data.get("mu")))
    directions = g.to_tangent(mu, _decode_block(data.get("directions")))
    denoised = _decode_block(data["denoised"]) if data.get("denoised") else np.zeros((0, 0))
    return Decomposition(
        mu=ManifoldPoint(mu, g),
        directions=directions,
        space=space,
        seen_ids=tuple(sorted(seen)),
        denoised=denoised,
        diagnostics=data.get("diagnostics") or {},
    )


def write_decomposition(path: PathLike, dec: Decomposition) -> None:
    atomic_write_text(path, canonical_json(decomposition_to_dict(dec)))


def read_decomposition(path: PathLike) -> Decomposition:
    return decomposition_from_dict(_read_json(path))


# =============================================================================
# Reports and weights
# =============================================================================
def write_report(report: Any, path: PathLike) -> str:
    """Write a report as canonical JSON and return the text."""
    text = canonical_json(report)
    atomic_write_text(path, text)
    return text


def read_weights(path: PathLike) -> np.ndarray:
    """Whitespace-separated floats, one per embedding row."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        return np.array([float(tok) for tok in text.split()], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"malformed weights file {path}: {e}")


def _read_json(path: PathLike) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e.msg} (line {e.lineno})", {"line": e.lineno})
