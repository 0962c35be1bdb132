"""Exception hierarchy shared by all modules."""


class AtlasError(Exception):
    """Base class for library errors."""


class DomainError(AtlasError, ValueError):
    """An argument lies outside the domain of an operation."""


class UsageError(AtlasError, ValueError):
    """Incompatible shapes, dimensions or options."""


class IntervalOverflowError(AtlasError, ArithmeticError):
    """A certified computation produced a non-finite endpoint."""


class CertificationError(AtlasError):
    """An enclosure could not be verified."""


class ResonanceError(CertificationError):
    """A resonance interval contains zero."""


class ConditioningError(AtlasError):
    """A linear system is numerically singular."""


class ValidationError(CertificationError):
    """The radii polynomial has no negative value.

    The offending bounds are kept on the exception for diagnosis.
    """

    def __init__(self, message, bounds=None):
        super().__init__(message)
        self.bounds = bounds


class ConfigError(AtlasError):
    """A run configuration could not be parsed or is inconsistent."""
