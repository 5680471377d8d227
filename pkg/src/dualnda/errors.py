"""Exception types shared across modules.

The CLI maps ``ConfigError`` to exit status 2 and every other
``DualNdaError`` to exit status 3.
"""


class DualNdaError(Exception):
    pass


class ConfigError(DualNdaError, ValueError):
    """Invalid settings, presets, or missing prerequisite artifacts."""


class LoadError(DualNdaError):
    pass


class DomainError(DualNdaError, ValueError):
    """An operation was called outside its input domain."""


class DegenerateInputError(DomainError):
    """Input carries no usable statistics (e.g. an all-zero sample)."""


class FitError(DualNdaError):
    pass


class EvaluationError(DualNdaError):
    pass


class TrainingError(DualNdaError):
    pass
