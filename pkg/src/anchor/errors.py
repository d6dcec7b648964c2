"""Exception hierarchy for the pipeline."""

from __future__ import annotations


class AnchorError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(AnchorError):
    """Invalid or missing configuration; the only error that aborts a run."""


class DomainError(AnchorError):
    """An argument fell outside its mathematical domain."""


class TransportError(AnchorError):
    """Network or provider failure; retryable."""


class ParseError(AnchorError):
    """No well-formed payload could be extracted from a model response."""


class DimensionMismatch(AnchorError):
    """Embedding provider returned vectors of an unexpected dimension."""


class BackendError(AnchorError):
    """A reduction or clustering backend failed."""


class SizeError(AnchorError):
    """An exact-enumeration guard was exceeded."""


class SchemaError(AnchorError):
    """A dataset record violated the expected schema."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class LengthMismatch(AnchorError):
    """Paired sequences of unequal length."""


class MockFixtureMissing(AnchorError):
    """A replay fixture was requested that does not exist; hard test failure."""
