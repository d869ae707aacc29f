"""Exception hierarchy shared across the package.

Validation problems (bad shapes, bad configs, bad usage) map to CLI exit
code 2; numerical aborts during training map to exit code 3.
"""


class XmregError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(XmregError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(XmregError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ConfigError(XmregError, ValueError):
    """A configuration value violates its documented constraints."""


class UsageError(XmregError, ValueError):
    """An API was called in a way its contract forbids."""


class GenerationError(XmregError, RuntimeError):
    """Scene synthesis could not satisfy the requested constraints."""


class FormatVersionError(XmregError, ValueError):
    """A serialized container declares an unsupported schema version."""


class ParseError(XmregError, ValueError):
    """A serialized container is corrupt; carries the failing byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericalAbort(XmregError, RuntimeError):
    """Training was aborted because a loss term became non-finite."""

    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} became non-finite ({value})")
        self.term = term
        self.value = value
