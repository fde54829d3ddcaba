"""Exception types shared across the package."""


class PurifierError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(PurifierError, ValueError):
    """A model/attack/run configuration is internally inconsistent."""


class ValidationError(PurifierError, ValueError):
    """Input data violates a documented precondition."""


class UnsupportedTaskError(PurifierError, ValueError):
    """An operation was asked to handle a task kind it does not support."""


class UnsupportedCombinationError(PurifierError, ValueError):
    """A legal-looking option combination is not implemented (e.g. targeted DeepFool)."""


class GradientUnavailableError(PurifierError, RuntimeError):
    """The attacked model does not expose input gradients."""


class EmptyClassSetError(PurifierError, ValueError):
    """A class-feature collection contains no feature vectors at all."""


class InsufficientDataError(PurifierError, ValueError):
    """Too few samples for a statistically meaningful computation."""


class NonFiniteLossError(PurifierError, RuntimeError):
    """A training loss term became NaN or infinite; names the offending term."""
