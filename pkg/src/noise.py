"""
Per-tuple noise distributions over the samples of each composite label.
Uniform, softmax (image-to-text) and sigmoid scores, plus a grid search for
the temperature on a validation objective.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import log_expit

from config.config import DEFAULT_TEMPERATURE_GRID, SIGLIP_LOGIT_BIAS, THREADS
from src.decompose import Decomposition, LabeledEmbeddingSet, compose_all, decompose_sparse
from src.errors import ConfigError, DimensionError, GeodecompError, MissingAnchor, TuningError
from src.karcher import MeanConfig
from src.manifold import GeometryKind, ManifoldPoint
from src.metrics import bank_from_decomposition, czsl_evaluate, group_evaluate, object_bank

logger = logging.getLogger(__name__)

AnchorsLike = Union[Mapping[tuple, Union[ManifoldPoint, np.ndarray]], Decomposition]


class NoiseMode(str, Enum):
    UNIFORM = "uniform"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Probabilities aligned with the rows of a labeled set; they sum to 1 within every tuple."""

    probs: np.ndarray
    sample_ids: tuple
    mode: NoiseMode
    temperature: Optional[float] = None
    logit_bias: Optional[float] = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "mode", NoiseMode(self.mode))

    def describe(self) -> dict:
        info = {"mode": self.mode.value}
        if self.temperature is not None:
            info["temperature"] = self.temperature
        if self.logit_bias is not None:
            info["logit_bias"] = self.logit_bias
        return info

    def to_frame(self, data: LabeledEmbeddingSet) -> pd.DataFrame:
        """One row per sample: id, tuple label and probability."""
        return pd.DataFrame({
            "sample_id": list(self.sample_ids),
            "tuple": [data.space.label(z) for z in data.labels],
            "p": self.probs,
        })

    def scores(self, data: LabeledEmbeddingSet) -> dict:
        """Mapping (tuple, sample_id) -> probability."""
        return {(z, sid): float(p) for z, sid, p in zip(data.labels, self.sample_ids, self.probs)}


def _normalize_per_tuple(logits: np.ndarray, tuple_ids: np.ndarray) -> np.ndarray:
    """Softmax of log-scores within each tuple, with max-subtraction."""
    frame = pd.DataFrame({"tuple": tuple_ids, "logit": logits})
    shifted = frame["logit"] - frame.groupby("tuple")["logit"].transform("max")
    frame["w"] = np.exp(shifted.to_numpy())
    return (frame["w"] / frame.groupby("tuple")["w"].transform("sum")).to_numpy()


def _check_temperature(t: float) -> float:
    t = float(t)
    if not np.isfinite(t) or t <= 0:
        raise ConfigError(f"temperature must be a positive number, got {t}", {"temperature": t})
    return t


def anchor_rows(data: LabeledEmbeddingSet, anchors: AnchorsLike) -> np.ndarray:
    """Anchor embedding of each row's tuple, as an (N, D) matrix."""
    g, space = data.geometry, data.space
    seen_ids = data.seen_ids()
    seen_labels = [space.decode(c) for c in space.tuple_codes(seen_ids)]
    if isinstance(anchors, Decomposition):
        if anchors.space != space:
            raise MissingAnchor("anchor decomposition has a different composition space")
        _, matrix = compose_all(anchors, seen_labels)
    else:
        lookup = {tuple(k): v for k, v in anchors.items()}
        missing = [space.label(z) for z in seen_labels if z not in lookup]
        if missing:
            raise MissingAnchor(
                f"no anchor for {len(missing)} tuple(s): {', '.join(missing[:5])}",
                {"tuples": missing},
            )
        matrix = np.stack([
            lookup[z].coords if isinstance(lookup[z], ManifoldPoint) else np.asarray(lookup[z], dtype=np.float64)
            for z in seen_labels
        ])
    if matrix.shape[-1] != g.coord_dim:
        raise DimensionError(
            f"anchors have {matrix.shape[-1]} coordinates, rows have {g.coord_dim}",
            {"anchors": int(matrix.shape[-1]), "rows": g.coord_dim},
        )
    position = np.searchsorted(seen_ids, data.tuple_ids)
    return matrix[position]


def pair_similarity(data: LabeledEmbeddingSet, anchors: AnchorsLike) -> np.ndarray:
    """Similarity of every row to its own tuple's anchor (negative distance on the hyperboloid)."""
    g = data.geometry
    paired = anchor_rows(data, anchors)
    if g.kind is GeometryKind.LORENTZ:
        return -g.dist(data.rows, paired)
    return np.sum(data.rows * paired, axis=-1)


def uniform_scores(data: LabeledEmbeddingSet) -> NoiseModel:
    """p = 1/k_z for the k_z rows of each tuple."""
    ids = data.tuple_ids
    counts = pd.Series(ids).map(pd.Series(ids).value_counts()).to_numpy()
    return NoiseModel(1.0 / counts, data.sample_ids, NoiseMode.UNIFORM)


def softmax_scores(data: LabeledEmbeddingSet, anchors: AnchorsLike, t: float) -> NoiseModel:
    """Softmax over each tuple's samples of their similarity to the tuple anchor divided by t."""
    t = _check_temperature(t)
    sims = pair_similarity(data, anchors)
    probs = _normalize_per_tuple(sims / t, data.tuple_ids)
    return NoiseModel(probs, data.sample_ids, NoiseMode.SOFTMAX, temperature=t)


def sigmoid_scores(
    data: LabeledEmbeddingSet,
    anchors: AnchorsLike,
    t: float,
    b: float = SIGLIP_LOGIT_BIAS,
) -> NoiseModel:
    """Pair-specific sigmoid probabilities sigma(sim/t + b), renormalized within each tuple."""
    t = _check_temperature(t)
    sims = pair_similarity(data, anchors)
    # log-space keeps very negative logits from underflowing to an all-zero tuple
    probs = _normalize_per_tuple(log_expit(sims / t + float(b)), data.tuple_ids)
    return NoiseModel(probs, data.sample_ids, NoiseMode.SIGMOID, temperature=t, logit_bias=float(b))


def build_noise(
    data: LabeledEmbeddingSet,
    mode: Union[str, NoiseMode],
    anchors: Optional[AnchorsLike] = None,
    t: Optional[float] = None,
    b: float = SIGLIP_LOGIT_BIAS,
) -> NoiseModel:
    mode = NoiseMode(mode)
    if mode is NoiseMode.UNIFORM:
        return uniform_scores(data)
    if anchors is None:
        raise ConfigError(f"{mode.value} noise needs anchors")
    if t is None:
        raise ConfigError(f"{mode.value} noise needs a temperature")
    if mode is NoiseMode.SOFTMAX:
        return softmax_scores(data, anchors, t)
    return sigmoid_scores(data, anchors, t, b)


# =============================================================================
# Temperature selection
# =============================================================================
@dataclass(frozen=True, eq=False)
class TuningResult:
    best_t: float
    best_score: float
    table: pd.DataFrame
    baseline_score: Optional[float] = None

    def to_dict(self) -> dict:
        rows = []
        for rec in self.table.to_dict(orient="records"):
            rows.append({
                "t": rec["t"],
                "score": None if pd.isna(rec["score"]) else rec["score"],
                "status": rec["status"],
                "error": rec["error"] or None,
            })
        out = {"best_t": self.best_t, "best_score": self.best_score, "table": rows}
        if self.baseline_score is not None:
            out["uniform_baseline"] = self.baseline_score
        return out


def _validation_score(
    dec: Decomposition,
    val: LabeledEmbeddingSet,
    objective: str,
    world: str,
    target_factor: int,
) -> float:
    if objective == "auc":
        candidates = None if world == "open" else sorted(dec.seen | val.seen())
        bank = bank_from_decomposition(dec, candidates)
        return czsl_evaluate(bank, val.rows, val.labels, dec.seen).auc
    bank = object_bank(dec, target_factor)
    objects = [(z[target_factor],) for z in val.labels]
    groups = [val.space.label(z) for z in val.labels]
    return group_evaluate(bank, val.rows, objects, groups).worst_group


def tune_temperature(
    train: LabeledEmbeddingSet,
    val: LabeledEmbeddingSet,
    anchors: AnchorsLike,
    grid: Optional[Sequence[float]] = None,
    objective: str = "auc",
    mode: Union[str, NoiseMode] = NoiseMode.SOFTMAX,
    world: str = "closed",
    b: float = SIGLIP_LOGIT_BIAS,
    cfg: Optional[MeanConfig] = None,
    target_factor: int = -1,
    include_baseline: bool = False,
    max_workers: int = THREADS,
) -> TuningResult:
    """
    Grid search of the noise temperature.
    Each grid point rebuilds the noise, reruns decompose_sparse on train and scores
    the result on val. Failed points stay in the table and are skipped by the
    argmax; ties go to the smaller temperature.
    """
    grid = list(DEFAULT_TEMPERATURE_GRID if grid is None else grid)
    if not grid:
        raise ConfigError("temperature grid is empty")
    for t in grid:
        _check_temperature(t)
    if objective not in ("auc", "worst-group"):
        raise ConfigError(f"unknown objective '{objective}'", {"objective": objective})
    if world not in ("closed", "open"):
        raise ConfigError(f"unknown world '{world}'", {"world": world})
    if NoiseMode(mode) is NoiseMode.UNIFORM:
        raise ConfigError("uniform noise has no temperature to tune")

    def run(t: float) -> dict:
        try:
            noise = build_noise(train, mode, anchors, t, b)
            dec = decompose_sparse(train, noise, cfg)
            score = float(_validation_score(dec, val, objective, world, target_factor))
            return {"t": float(t), "score": score, "status": "ok", "error": ""}
        except GeodecompError as e:
            logger.warning("Temperature %g failed: %s", t, e.message)
            return {"t": float(t), "score": np.nan, "status": "failed", "error": e.code}

    with ThreadPoolExecutor(max_workers=max(1, min(max_workers, len(grid)))) as pool:
        records = list(pool.map(run, grid))
    table = pd.DataFrame.from_records(records, columns=["t", "score", "status", "error"])

    ok = table[(table["status"] == "ok") & table["score"].notna()]
    if ok.empty:
        raise TuningError("every temperature in the grid failed", {"grid": [float(t) for t in grid]})
    best_score = float(ok["score"].max())
    best_t = float(ok.loc[ok["score"] == best_score, "t"].min())

    baseline = None
    if include_baseline:
        dec = decompose_sparse(train, uniform_scores(train), cfg)
        baseline = float(_validation_score(dec, val, objective, world, target_factor))
        logger.info("Uniform-noise baseline %s = %.4f", objective, baseline)

    return TuningResult(best_t=best_t, best_score=best_score, table=table, baseline_score=baseline)
