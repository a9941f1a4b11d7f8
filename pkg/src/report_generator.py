"""
Report Generator Module
Serializes result objects as canonical JSON (sorted keys, fixed float format)
and as plain-text tables for --pretty output.
"""
import json
import math
import re
from typing import Any

import numpy as np
import pandas as pd

from config.config import REPORT_FLOAT_FORMAT

_FLOAT_MARK = "\u0001f:"
_FLOAT_RE = re.compile('"' + re.escape(json.dumps(_FLOAT_MARK)[1:-1]) + r'([^"]*)"')


def to_plain(obj: Any) -> Any:
    """Convert numpy values, tuples and report objects into JSON-ready Python values."""
    if hasattr(obj, "to_dict") and not isinstance(obj, (pd.DataFrame, pd.Series)):
        return to_plain(obj.to_dict())
    if isinstance(obj, pd.DataFrame):
        return to_plain(obj.to_dict(orient="records"))
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _mark_floats(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _mark_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_mark_floats(v) for v in obj]
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        text = REPORT_FLOAT_FORMAT % obj
        if float(text) == 0:
            text = REPORT_FLOAT_FORMAT % 0.0
        return _FLOAT_MARK + text
    return obj


def canonical_json(obj: Any) -> str:
    """Sorted keys, two-space indent, floats as %.6f, NaN and infinities as null."""
    text = json.dumps(_mark_floats(to_plain(obj)), sort_keys=True, indent=2, ensure_ascii=False)
    return _FLOAT_RE.sub(lambda m: m.group(1), text) + "\n"


def render_pretty(obj: Any) -> str:
    """Human-readable tables: one key/value table, then one table per list of records."""
    plain = to_plain(obj)
    if not isinstance(plain, dict):
        return str(plain) + "\n"
    scalars, tables = {}, {}

    def walk(prefix: str, value: Any) -> None:
        if isinstance(value, dict):
            for k in sorted(value):
                walk(f"{prefix}.{k}" if prefix else k, value[k])
        elif isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
            tables[prefix] = pd.DataFrame(value)
        elif isinstance(value, list) and len(value) > 8:
            scalars[prefix] = f"[{len(value)} values]"
        else:
            scalars[prefix] = value

    walk("", plain)
    parts = []
    if scalars:
        summary = pd.DataFrame({"key": list(scalars), "value": [str(v) for v in scalars.values()]})
        parts.append(summary.to_string(index=False))
    for name, df in tables.items():
        parts.append(f"\n{name}\n" + df.to_string(index=False, float_format=lambda x: REPORT_FLOAT_FORMAT % x))
    return "\n".join(parts) + "\n"
