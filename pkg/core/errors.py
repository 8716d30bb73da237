"""
core/errors.py

Exception hierarchy for ridgelab. Divergent errors are not exceptions; they
are reported as the ``math.inf`` sentinel.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import Optional


class RidgeLabError(Exception):
    """Base class for all ridgelab failures."""


class ParameterError(RidgeLabError, ValueError):
    """A precondition on a scalar or array argument was violated."""


class CovarianceError(RidgeLabError, ValueError):
    """Covariance matrix is not symmetric, not PSD, or cannot be factorized."""


class PlanError(RidgeLabError, ValueError):
    """Subsampling masks are invalid for the requested dimension."""


class NonConvergence(RidgeLabError):
    """Saddle-point iteration exhausted its budget."""

    def __init__(self, readout: int, iterations: int, residual: float) -> None:
        self.readout = readout
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"saddle-point iteration for readout {readout} did not converge after "
            f"{iterations} iterations (last relative residual {residual:.3e})"
        )


class SingularResolvent(RidgeLabError):
    """G_r = I + q_hat * Sigma_tilde could not be factorized."""

    def __init__(self, readout: int, detail: str = "") -> None:
        self.readout = readout
        msg = f"resolvent of readout {readout} is numerically singular"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class DatasetFormatError(RidgeLabError, ValueError):
    """A feature file could not be parsed or failed validation."""

    def __init__(
        self, message: str, *, path: Optional[str] = None, line: Optional[int] = None, row: Optional[int] = None
    ) -> None:
        self.message = message
        self.path = path
        self.line = line
        self.row = row
        where = []
        if path:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if row is not None:
            where.append(f"row {row}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class ConfigValidationError(RidgeLabError, ValueError):
    """Experiment document failed validation; ``errors`` holds (json_path, message) pairs."""

    def __init__(self, errors: Sequence[tuple[str, str]]) -> None:
        self.errors = list(errors)
        lines = [f"{path}: {msg}" for path, msg in self.errors]
        super().__init__("invalid experiment document\n  " + "\n  ".join(lines))
