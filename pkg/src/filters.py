"""Row selection on labeled embedding sets."""
import logging
from typing import Iterable

import numpy as np
import pandas as pd

from src.decompose import LabeledEmbeddingSet
from src.errors import ConfigError, EmptyInput

logger = logging.getLogger(__name__)


def stratified_subsample(data: LabeledEmbeddingSet, fraction: float, seed: int = 0) -> LabeledEmbeddingSet:
    """Keep a random fraction of each tuple's rows (at least one), so tuple proportions stay fixed."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]", {"fraction": fraction})
    if fraction == 1:
        return data
    rng = np.random.default_rng(seed)
    frame = pd.DataFrame({"tuple": data.tuple_ids, "key": rng.random(len(data))})
    frame["rank"] = frame.groupby("tuple")["key"].rank(method="first")
    frame["size"] = frame.groupby("tuple")["key"].transform("size")
    keep = frame["rank"] <= np.maximum(1, np.round(fraction * frame["size"]))
    logger.info("Keeping %d of %d rows (fraction %.3f per tuple)", int(keep.sum()), len(data), fraction)
    return data.subset(keep.to_numpy())


def filter_by_tuples(data: LabeledEmbeddingSet, tuples: Iterable, keep: bool = True) -> LabeledEmbeddingSet:
    """Rows whose tuple is (or with keep=False, is not) in `tuples`."""
    wanted = {tuple(z) for z in tuples}
    mask = np.array([z in wanted for z in data.labels]) == keep
    if not mask.any():
        raise EmptyInput("no rows left after filtering by tuple")
    return data.subset(mask)
