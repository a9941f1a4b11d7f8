"""
Prediction rules and evaluation metrics.
Compositional classification with the seen/unseen bias sweep, the AUC ratio
against a baseline, and worst-group robustness.
"""
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from config.config import UNIFORM_BIAS_POINTS
from src.decompose import Decomposition, compose_all
from src.errors import ConfigError, DivisionByZero, EmptyInput
from src.manifold import Geometry, ManifoldPoint

logger = logging.getLogger(__name__)

# Biases evaluated per vectorized block of the sweep
SWEEP_BLOCK = 256


def _as_label(z) -> tuple:
    return (z,) if isinstance(z, str) else tuple(z)


@dataclass(frozen=True, eq=False)
class ClassifierBank:
    """Candidate labels with their anchor embeddings, kept in lexicographic label order."""

    geometry: Geometry
    labels: tuple
    anchors: np.ndarray

    def __post_init__(self):
        labels = [_as_label(z) for z in self.labels]
        if not labels:
            raise EmptyInput("the candidate set is empty")
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
        if anchors.shape[0] != len(labels):
            raise ConfigError("one anchor per candidate label is required")
        if len(set(labels)) != len(labels):
            raise ConfigError("candidate labels repeat")
        self.geometry.check_points(anchors, what="anchor")
        # argmax returns the first maximum, so column order breaks ties
        order = sorted(range(len(labels)), key=lambda i: labels[i])
        object.__setattr__(self, "labels", tuple(labels[i] for i in order))
        object.__setattr__(self, "anchors", anchors[order])

    def __len__(self) -> int:
        return len(self.labels)

    def index(self) -> dict:
        return {z: i for i, z in enumerate(self.labels)}

    def scores(self, queries: np.ndarray) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        self.geometry.check_points(queries, what="query")
        return self.geometry.similarity(queries, self.anchors)


def bank_from_anchors(geometry: Geometry, anchors: Mapping) -> ClassifierBank:
    """Bank from explicit per-label anchor points (the zero-shot baseline)."""
    labels = list(anchors.keys())
    rows = [a.coords if isinstance(a, ManifoldPoint) else np.asarray(a, dtype=np.float64) for a in anchors.values()]
    if not rows:
        raise EmptyInput("the candidate set is empty")
    return ClassifierBank(geometry, tuple(labels), np.stack(rows))


def bank_from_decomposition(dec: Decomposition, candidates: Optional[Sequence[Sequence[str]]] = None) -> ClassifierBank:
    """Composed anchors for the candidate tuples (all of the space when omitted)."""
    tuples, points = compose_all(dec, candidates)
    if not tuples:
        raise EmptyInput("the candidate set is empty")
    return ClassifierBank(dec.geometry, tuple(tuples), points)


def object_bank(dec: Decomposition, factor: int = -1) -> ClassifierBank:
    """Anchors Exp_mu(v_o) built from single directions of one factor."""
    i = factor % dec.space.n_factors
    offset, f = dec.space.offsets[i], dec.space.factors[i]
    rows = dec.directions[offset:offset + len(f.primitives)]
    points = dec.geometry.exp(dec.mu.coords[None, :], rows)
    return ClassifierBank(dec.geometry, tuple((p,) for p in f.primitives), points)


# =============================================================================
# Prediction
# =============================================================================
@dataclass(frozen=True, eq=False)
class Prediction:
    indices: np.ndarray
    labels: list
    scores: np.ndarray


def _unseen_columns(bank: ClassifierBank, seen) -> np.ndarray:
    if seen is None:
        return np.zeros(len(bank), dtype=bool)
    seen = {_as_label(z) for z in seen}
    return np.array([z not in seen for z in bank.labels])


def predict(
    bank: ClassifierBank,
    queries: np.ndarray,
    unseen_bias: float = 0.0,
    seen=None,
) -> Prediction:
    """Argmax of the scores after adding unseen_bias to every candidate outside `seen`."""
    scores = bank.scores(queries)
    unseen = _unseen_columns(bank, seen)
    biased = scores + float(unseen_bias) * unseen if unseen.any() else scores
    idx = np.argmax(biased, axis=1)
    return Prediction(indices=idx, labels=[bank.labels[i] for i in idx], scores=scores)


# =============================================================================
# Compositional zero-shot evaluation
# =============================================================================
@dataclass(frozen=True)
class CZSLReport:
    attr_acc: float
    obj_acc: float
    best_seen: float
    best_unseen: float
    best_hm: float
    auc: float
    curve: list
    factor_acc: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "attr_acc": self.attr_acc,
            "obj_acc": self.obj_acc,
            "best_seen": self.best_seen,
            "best_unseen": self.best_unseen,
            "best_hm": self.best_hm,
            "auc": self.auc,
            "factor_acc": list(self.factor_acc),
            "curve": [{"bias": b, "seen_acc": s, "unseen_acc": u} for b, s, u in self.curve],
            "diagnostics": dict(self.diagnostics),
        }


def exact_bias_grid(seen_best: np.ndarray, unseen_best: np.ndarray) -> np.ndarray:
    """
    Every bias at which some prediction can flip: the per-query thresholds
    max_seen - max_unseen, the midpoints between consecutive thresholds, and one
    sentinel beyond each end.
    """
    d = np.unique(seen_best - unseen_best)
    d = d[np.isfinite(d)]
    if d.size == 0:
        return np.array([0.0])
    mids = (d[:-1] + d[1:]) / 2.0
    return np.unique(np.concatenate([[d[0] - 1.0], d, mids, [d[-1] + 1.0]]))


def uniform_bias_grid(seen_best: np.ndarray, unseen_best: np.ndarray, points: int = UNIFORM_BIAS_POINTS) -> np.ndarray:
    d = seen_best - unseen_best
    d = d[np.isfinite(d)]
    if d.size == 0:
        return np.array([0.0])
    inner = np.linspace(d.min(), d.max(), points)
    return np.unique(np.concatenate([[d.min() - 1.0], inner, [d.max() + 1.0]]))


def pareto_auc(seen_acc: np.ndarray, unseen_acc: np.ndarray) -> float:
    """Trapezoid area under the Pareto frontier of (seen, unseen) points, closed to both axes."""
    pts = np.column_stack([seen_acc, unseen_acc])
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if pts.shape[0] == 0:
        return float("nan")
    # keep points no other point dominates, ordered by seen accuracy
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    frontier = []
    for s, u in pts[::-1]:
        if not frontier or u > frontier[-1][1]:
            frontier.append((s, u))
    frontier = np.array(frontier[::-1])
    xs = np.concatenate([[0.0], frontier[:, 0], [frontier[-1, 0]]])
    ys = np.concatenate([[frontier[0, 1]], frontier[:, 1], [0.0]])
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def _group_accuracy(correct: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Accuracy over the masked queries for each bias row of `correct`."""
    if not mask.any():
        return np.full(correct.shape[0], np.nan)
    return correct[:, mask].mean(axis=1)


def czsl_evaluate(
    bank: ClassifierBank,
    queries: np.ndarray,
    true_labels: Sequence,
    seen,
    bias_grid: Union[str, Sequence[float], None] = "exact",
) -> CZSLReport:
    """
    Generalized compositional classification metrics over a bias sweep.
    `bias_grid` is 'exact', 'uniform' or an explicit list of biases.
    """
    true_labels = [_as_label(z) for z in true_labels]
    scores = bank.scores(queries)
    if scores.shape[0] != len(true_labels):
        raise ConfigError(f"{scores.shape[0]} queries but {len(true_labels)} labels")
    if scores.shape[0] == 0:
        raise EmptyInput("no queries to evaluate")

    seen_set = {_as_label(z) for z in seen}
    unseen_cols = _unseen_columns(bank, seen_set)
    lookup = bank.index()
    truth = np.array([lookup.get(z, -1) for z in true_labels])
    seen_queries = np.array([z in seen_set for z in true_labels])
    diagnostics = {
        "n_queries": int(scores.shape[0]),
        "n_candidates": len(bank),
        "n_seen_queries": int(seen_queries.sum()),
        "n_unseen_queries": int((~seen_queries).sum()),
        "n_out_of_bank": int(np.sum(truth < 0)),
    }

    # best candidate and score inside each column group; argmax keeps the smallest index on ties
    neg = np.full_like(scores, -np.inf)
    seen_scores = np.where(unseen_cols, neg, scores)
    unseen_scores = np.where(unseen_cols, scores, neg)
    seen_idx, unseen_idx = seen_scores.argmax(axis=1), unseen_scores.argmax(axis=1)
    rows = np.arange(scores.shape[0])
    seen_best, unseen_best = seen_scores[rows, seen_idx], unseen_scores[rows, unseen_idx]
    if not unseen_cols.any():
        unseen_idx = seen_idx
    if unseen_cols.all():
        seen_idx = unseen_idx

    if isinstance(bias_grid, str) or bias_grid is None:
        policy = bias_grid or "exact"
        if policy == "exact":
            grid = exact_bias_grid(seen_best, unseen_best)
        elif policy == "uniform":
            grid = uniform_bias_grid(seen_best, unseen_best)
        else:
            raise ConfigError(f"unknown bias grid policy '{policy}'", {"bias_grid": policy})
    else:
        policy = "explicit"
        grid = np.asarray(list(bias_grid), dtype=np.float64)
        if grid.size == 0:
            raise ConfigError("bias grid is empty")
    diagnostics["bias_grid"] = policy
    diagnostics["grid_size"] = int(grid.size)

    seen_acc, unseen_acc = [], []
    for start in range(0, grid.size, SWEEP_BLOCK):
        b = grid[start:start + SWEEP_BLOCK, None]
        shifted = unseen_best[None, :] + b
        pick_seen = seen_best[None, :] > shifted
        tie = seen_best[None, :] == shifted
        pred = np.where(pick_seen, seen_idx, unseen_idx)
        pred = np.where(tie, np.minimum(seen_idx, unseen_idx), pred)
        correct = pred == truth[None, :]
        seen_acc.append(_group_accuracy(correct, seen_queries))
        unseen_acc.append(_group_accuracy(correct, ~seen_queries))
    seen_acc, unseen_acc = np.concatenate(seen_acc), np.concatenate(unseen_acc)

    if not (~seen_queries).any():
        logger.warning("No unseen test queries; unseen metrics are undefined")
        diagnostics["degenerate_split"] = "no unseen queries"
    elif not seen_queries.any():
        logger.warning("No seen test queries; seen metrics are undefined")
        diagnostics["degenerate_split"] = "no seen queries"

    with np.errstate(invalid="ignore", divide="ignore"):
        denom = seen_acc + unseen_acc
        hm = np.where(denom > 0, 2.0 * seen_acc * unseen_acc / np.where(denom > 0, denom, 1.0), 0.0)
    hm = np.where(np.isnan(denom), np.nan, hm)

    def _max(x: np.ndarray) -> float:
        return float("nan") if np.all(np.isnan(x)) else float(np.nanmax(x))

    best_hm = _max(hm)
    if np.isfinite(best_hm):
        diagnostics["best_hm_bias"] = float(grid[int(np.nanargmax(hm))])
    degenerate = "degenerate_split" in diagnostics

    # component accuracies at bias 0
    pred0 = predict(bank, queries, 0.0, seen_set).labels
    n_factors = len(true_labels[0])
    factor_acc = [
        float(np.mean([p[i] == t[i] if len(p) == len(t) else False for p, t in zip(pred0, true_labels)]))
        for i in range(n_factors)
    ]

    curve = [(float(b), float(s), float(u)) for b, s, u in zip(grid, seen_acc, unseen_acc)]
    return CZSLReport(
        attr_acc=factor_acc[0],
        obj_acc=factor_acc[-1],
        best_seen=_max(seen_acc),
        best_unseen=_max(unseen_acc),
        best_hm=float("nan") if degenerate else best_hm,
        auc=float("nan") if degenerate else pareto_auc(seen_acc, unseen_acc),
        curve=curve,
        factor_acc=factor_acc,
        diagnostics=diagnostics,
    )


def auc_ratio(auc: float, baseline_auc: float) -> float:
    """Relative performance 100 * auc / baseline_auc, in percent."""
    if baseline_auc == 0:
        raise DivisionByZero("baseline AUC is zero", {"baseline_auc": baseline_auc})
    if baseline_auc < 0:
        raise ConfigError("baseline AUC must be positive", {"baseline_auc": baseline_auc})
    return 100.0 * float(auc) / float(baseline_auc)


# =============================================================================
# Group robustness
# =============================================================================
@dataclass(frozen=True)
class GroupReport:
    worst_group: float
    avg: float
    gap: float
    per_group: dict
    sample_avg: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "worst_group": self.worst_group,
            "avg": self.avg,
            "gap": self.gap,
            "sample_avg": self.sample_avg,
            "per_group": dict(sorted(self.per_group.items())),
            "diagnostics": dict(self.diagnostics),
        }


def group_evaluate(
    bank: ClassifierBank,
    queries: np.ndarray,
    labels: Sequence,
    groups: Sequence[str],
    declared_groups: Optional[Sequence[str]] = None,
) -> GroupReport:
    """
    Per-group accuracy of the bank's predictions.
    AVG is the unweighted mean over groups; `sample_avg` is plain accuracy.
    Declared groups with no queries are reported in diagnostics and excluded.
    """
    labels = [_as_label(z) for z in labels]
    groups = [str(g) for g in groups]
    if len(labels) != len(groups):
        raise ConfigError(f"{len(labels)} labels but {len(groups)} group labels")
    pred = predict(bank, queries).labels
    if len(pred) != len(labels):
        raise ConfigError(f"{len(pred)} queries but {len(labels)} labels")

    frame = pd.DataFrame({"group": groups, "correct": [p == t for p, t in zip(pred, labels)]})
    per_group = frame.groupby("group", sort=True)["correct"].mean()
    diagnostics = {"n_queries": len(labels), "n_groups": int(per_group.size)}
    if declared_groups is not None:
        empty = sorted(set(map(str, declared_groups)) - set(per_group.index))
        if empty:
            logger.warning("Excluding %d empty group(s): %s", len(empty), ", ".join(empty[:5]))
            diagnostics["empty_groups"] = empty
    if per_group.empty:
        raise EmptyInput("no groups to evaluate")

    worst = float(per_group.min())
    avg = float(per_group.mean())
    return GroupReport(
        worst_group=worst,
        avg=avg,
        gap=avg - worst,
        per_group={k: float(v) for k, v in per_group.items()},
        sample_avg=float(frame["correct"].mean()),
        diagnostics=diagnostics,
    )
