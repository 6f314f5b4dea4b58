"""Exception types shared across the package."""


class ChokefitError(Exception):
    """Base class for all package errors."""


class DomainError(ChokefitError, ValueError):
    """An input violates a physical-domain precondition (e.g. negative pressure)."""


class ModelEvaluationError(ChokefitError):
    """The flow model could not be evaluated at the given parameters.

    Carries the offending inputs so callers can decide whether to penalize
    the evaluation point or abort.
    """

    def __init__(self, message: str, inputs: dict | None = None):
        super().__init__(message)
        self.inputs = dict(inputs) if inputs else {}


class SingularMatrixError(ChokefitError):
    """A linear solve hit a (numerically) singular matrix."""


class SchemaError(ChokefitError, ValueError):
    """A CSV file does not match the configured schema."""


class DataError(ChokefitError, ValueError):
    """A dataset-level failure: empty result, infeasible ranges, bad rows."""


class TrainingError(ChokefitError):
    """All restarts of a fit diverged or failed.

    ``diagnostics`` holds per-restart failure notes.
    """

    def __init__(self, message: str, diagnostics: list | None = None):
        super().__init__(message)
        self.diagnostics = list(diagnostics) if diagnostics else []


class ConfigError(ChokefitError, ValueError):
    """A run-configuration file or flag is invalid."""
