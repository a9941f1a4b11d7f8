"""Utility functions for geodecomp output files."""
import os
import tempfile
from pathlib import Path
from typing import Union

import pandas as pd

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write to a temp file next to `path`, then rename over it."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def get_csv_bytes(df: pd.DataFrame) -> bytes:
    """Convert dataframe to CSV bytes (fixed float format, no index)."""
    return df.to_csv(index=False, float_format="%.9g", lineterminator="\n").encode("utf-8")
