"""Exception types shared across the package.

The CLI maps these onto machine-readable error JSON; library callers can
catch the base class or the specific kind.
"""


class FieldAttnError(Exception):
    """Base class for all package errors."""


class DomainError(FieldAttnError, ValueError):
    """An operation was called with inputs outside its domain."""


class ConfigError(FieldAttnError, ValueError):
    """A schema, model, or run configuration is inconsistent."""


class DataError(FieldAttnError, ValueError):
    """A dataset file or raw sample is malformed.

    Carries optional context (line number, sample index, field name) in
    the message so ingestion failures are actionable.
    """


class ResourceLimitError(FieldAttnError, RuntimeError):
    """A requested configuration exceeds an explicit resource budget."""

    def __init__(self, message: str, requested: int, limit: int):
        super().__init__(message)
        self.requested = requested
        self.limit = limit


class InternalError(FieldAttnError, RuntimeError):
    """Invariant violation inside the library (a bug, not a user error)."""
