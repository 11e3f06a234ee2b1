"""Exception types shared across the package; the CLI maps each to an exit code."""

from .tensor import ContractError, ShapeError


class ConfigError(ValueError):
    """Invalid configuration value, key or weight."""


class DataError(RuntimeError):
    """Missing, unreadable or inconsistent dataset files."""


class NumericalError(RuntimeError):
    """A non-finite value appeared during training or evaluation."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


__all__ = ["ConfigError", "ContractError", "DataError", "NumericalError", "ShapeError"]
