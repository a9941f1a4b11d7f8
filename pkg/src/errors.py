"""Error types raised by geodecomp, each with a stable machine-readable code."""
from typing import Any, Optional


class GeodecompError(Exception):
    """Base class for every domain error."""

    code = "geodecomp_error"

    def __init__(self, message: str, context: Optional[dict] = None):
        super().__init__(message)
        self.message = message
        self.context = dict(context or {})

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, "context": self.context}


class DimensionError(GeodecompError):
    code = "dimension_error"


class ManifoldViolation(GeodecompError):
    code = "manifold_violation"


class CutLocusError(GeodecompError):
    code = "cut_locus_error"


class DegenerateInput(GeodecompError):
    code = "degenerate_input"


class EmptyInput(GeodecompError):
    code = "empty_input"


class StructureError(GeodecompError):
    code = "structure_error"


class DegenerateNoise(GeodecompError):
    code = "degenerate_noise"


class CoverageError(GeodecompError):
    code = "coverage_error"


class UnknownPrimitive(GeodecompError):
    code = "unknown_primitive"


class MissingAnchor(GeodecompError):
    code = "missing_anchor"


class ConfigError(GeodecompError, ValueError):
    code = "config_error"


class TuningError(GeodecompError):
    code = "tuning_error"


class OracleDivergence(GeodecompError):
    code = "oracle_divergence"


class FormatError(GeodecompError):
    code = "format_error"


class TruncationError(GeodecompError):
    code = "truncation_error"


class DataError(GeodecompError):
    code = "data_error"


class AlignmentError(GeodecompError):
    code = "alignment_error"


class DivisionByZero(GeodecompError, ZeroDivisionError):
    code = "division_by_zero"


class DecompositionError(GeodecompError):
    code = "decomposition_error"
