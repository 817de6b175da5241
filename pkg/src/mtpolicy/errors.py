"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Inputs rejected because shapes or indices are inconsistent."""


class ModelFitError(RuntimeError):
    """GP training failed (e.g. Cholesky failure after jitter escalation)."""


class NumericalDegeneracyError(RuntimeError):
    """A moment computation degenerated numerically.

    Carries enough context (output dimension, rollout step) to locate
    the offending quantity.
    """

    def __init__(self, message: str, *, output_dim: int | None = None, step: int | None = None):
        super().__init__(message)
        self.output_dim = output_dim
        self.step = step


class OptimizerError(RuntimeError):
    """Non-finite objective value or gradient at the starting point."""

    def __init__(self, message: str, *, theta=None):
        super().__init__(message)
        self.theta = theta


class RunStateLoadError(ValueError):
    """Persisted run state could not be loaded; names the offending field."""

    def __init__(self, message: str, *, field: str | None = None):
        super().__init__(message)
        self.field = field
