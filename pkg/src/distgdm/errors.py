"""Exception hierarchy shared across the package."""


class DistGDMError(Exception):
    """Base class for all package errors."""


class ConfigError(DistGDMError, ValueError):
    """Invalid configuration value or inconsistent configuration."""


class DimensionError(DistGDMError, ValueError):
    """Array shapes do not compose."""


class DomainError(DistGDMError, ValueError):
    """Argument outside the domain of an operation."""


class NumericError(DistGDMError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class GraphStateError(DistGDMError, RuntimeError):
    """Graph used in the wrong order (e.g. backward before forward)."""


class PlanError(DistGDMError, ValueError):
    """Inference plan violates its invariants."""


class PromptLookupError(DistGDMError, KeyError):
    """Unknown prompt id."""


class UnsupportedError(DistGDMError, NotImplementedError):
    """Requested mode is not available for the given inputs."""


class EvaluatorError(DistGDMError, RuntimeError):
    """External QoE evaluator failed."""

    def __init__(self, message, retries=0):
        super().__init__(f"{message} (after {retries} retries)" if retries else message)
        self.retries = retries


class TrainingError(DistGDMError, RuntimeError):
    """Training diverged or hit a non-finite value."""

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} at iteration {iteration}")
        self.iteration = iteration
