"""
Exception hierarchy shared by the library and the command line.

Validation problems (bad shapes, configs, files) map to exit code 2,
numerical failures (non-finite values, failed factorizations, divergence)
map to exit code 3.
"""

from __future__ import annotations

from typing import Any, Optional


class CotlabError(Exception):
    """Base class for every error raised by cotlab."""

    exit_code = 1


# --- validation -----------------------------------------------------------

class ValidationError(CotlabError):
    exit_code = 2


class ShapeMismatchError(ValidationError):
    def __init__(self, op: str, node: int, shapes: Any, detail: str = ""):
        self.op = op
        self.node = node
        self.shapes = shapes
        msg = f"shape mismatch in '{op}' at node {node}: {shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AsymmetryError(ValidationError):
    def __init__(self, deviation: float, tolerance: float):
        self.deviation = deviation
        self.tolerance = tolerance
        super().__init__(
            f"matrix is not symmetric: max deviation {deviation:.3e} > {tolerance:.1e}"
        )


class ConfigError(ValidationError):
    pass


class DatasetError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class FormatVersionError(CheckpointError):
    pass


class ModelKindMismatchError(CheckpointError):
    pass


class AutodiffUsageError(ValidationError):
    """Raised when the tape is driven in an unsupported order."""


# --- numerics -------------------------------------------------------------

class NumericalError(CotlabError):
    exit_code = 3


class NonFiniteError(NumericalError):
    def __init__(self, where: str, index: int, detail: str = ""):
        self.where = where
        self.index = index
        msg = f"non-finite value produced by {where} at index {index}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class FactorizationError(NumericalError):
    def __init__(self, pivot: int, sample: Optional[int] = None):
        self.pivot = pivot
        self.sample = sample
        where = f" (sample {sample})" if sample is not None else ""
        super().__init__(f"Cholesky factorization failed at pivot {pivot}{where}")


class DivergenceError(NumericalError):
    """Training went non-finite; ``last_good`` holds the parameters that last validated."""

    def __init__(self, message: str, last_good: Any = None, record: Any = None):
        self.last_good = last_good
        self.record = record
        super().__init__(message)
