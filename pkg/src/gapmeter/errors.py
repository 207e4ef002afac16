"""Exception hierarchy shared by all gapmeter modules."""

from __future__ import annotations


class GapmeterError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(GapmeterError):
    """Input data does not match an expected column layout or arity."""


class ParameterError(GapmeterError, ValueError):
    """A configuration value or function argument is out of range."""


class StateError(GapmeterError):
    """Data is in the wrong state for an operation (e.g. missing group labels)."""


class InsufficientDataError(GapmeterError):
    """Too few rows survive to satisfy the requested anonymity level."""


class SuppressionBudgetError(GapmeterError):
    """More outlier rows were flagged than the suppression budget allows.

    ``outliers`` lists the flagged (row_index, qi_values) pairs so callers can
    report exactly which rows bind the budget.
    """

    def __init__(self, message: str, outliers: list[tuple[int, tuple[float, ...]]]):
        super().__init__(message)
        self.outliers = outliers


class CryptoError(GapmeterError):
    """Sealing or unsealing an envelope failed (wrong key, tampered data)."""


class ValidationError(GapmeterError):
    """A partner file failed validation.

    ``issues`` holds (line_number, message) pairs for every problem found;
    validation is exhaustive rather than fail-fast so a whole batch can be
    fixed in one round trip.
    """

    def __init__(self, issues: list[tuple[int, str]]):
        lines = "; ".join(f"line {n}: {msg}" for n, msg in issues)
        super().__init__(f"{len(issues)} validation issue(s): {lines}")
        self.issues = issues


class SimulationError(GapmeterError):
    """A simulation grid cell failed (too many aborted runs)."""
