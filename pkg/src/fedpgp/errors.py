"""Exception types shared across the package."""

from __future__ import annotations


class FedPGPError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameterError(FedPGPError, ValueError):
    pass


class ShapeError(FedPGPError, ValueError):
    pass


class DegenerateVectorError(FedPGPError, ValueError):
    pass


class UnknownClassError(FedPGPError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class NumericalFailureError(FedPGPError, ArithmeticError):
    pass


class NoParticipantsError(FedPGPError, RuntimeError):
    pass


class UndefinedMetricError(FedPGPError, ValueError):
    pass


class ConfigError(InvalidParameterError):
    """Config validation failure. ``key`` names the offending field."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key
