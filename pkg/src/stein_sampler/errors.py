"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SteinSamplerError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SteinSamplerError, ValueError):
    """A point lies on or outside the support of a density."""

    def __init__(self, message: str, coordinate: int | None = None, index: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate
        self.index = index


class DegenerateSetError(SteinSamplerError, ValueError):
    """A point set is too small or too concentrated for the requested statistic."""


class NumericalInconsistencyError(SteinSamplerError, ArithmeticError):
    """A quantity that must be nonnegative came out clearly negative."""


class DivergenceError(SteinSamplerError, FloatingPointError):
    """Training or particle updates produced non-finite values."""

    def __init__(self, message: str, step: int | None = None, where: str | None = None):
        super().__init__(message)
        self.step = step
        self.where = where


class ConfigError(SteinSamplerError, ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class ParseError(SteinSamplerError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line
