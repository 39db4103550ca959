"""Exception types shared across the package."""

from __future__ import annotations


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""

    def __init__(self, message: str, fields: list[str] | None = None):
        super().__init__(message)
        self.fields = list(fields or [])


class ContractError(RuntimeError):
    """A caller broke a function precondition (e.g. non-scalar loss, empty batch)."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (double backward, missing tape)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record


class DataError(RuntimeError):
    """Required run data is missing or empty."""
