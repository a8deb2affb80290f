"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class TweedieFlowError(Exception):
    exit_code = 1


class ConfigError(TweedieFlowError, ValueError):
    """Bad configuration: dimension mismatch, invalid spec, schema violation."""

    exit_code = 2


class CapabilityError(TweedieFlowError):
    """The requested quantity is not available for this variant."""

    exit_code = 2


class StateError(TweedieFlowError, RuntimeError):
    exit_code = 1


class NumericError(TweedieFlowError, ArithmeticError):
    """Non-finite values or a singular quantity."""

    exit_code = 3

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class DivergenceError(NumericError):
    exit_code = 3


class InvariantError(TweedieFlowError, AssertionError):
    """A hard invariant was violated, e.g. frozen weights were mutated."""

    exit_code = 4
