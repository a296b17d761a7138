"""Exception hierarchy shared by all hekf_kit modules."""


class HekfKitError(Exception):
    """Base class for every error raised by this package."""


class DomainError(HekfKitError, ValueError):
    """An argument lies outside the domain where a model is defined."""


class ConfigurationError(HekfKitError, ValueError):
    """Inconsistent configuration, file contents or array shapes."""


class NumericalFailure(HekfKitError, ArithmeticError):
    """A filter produced non-finite values or hit a singular matrix."""


class TrainingFailure(HekfKitError, RuntimeError):
    pass


class TuningFailure(HekfKitError, RuntimeError):
    pass


class IdentificationFailure(HekfKitError, RuntimeError):
    pass


class GenerationError(HekfKitError, RuntimeError):
    pass


class ProtocolError(HekfKitError, RuntimeError):
    """Raised when an evaluation sub-run fails; carries the partial report."""

    def __init__(self, message, partial_report=None):
        super().__init__(message)
        self.partial_report = partial_report
