"""Exception types shared across the package."""


class ConditioningError(RuntimeError):
    """A matrix that must be positive definite is numerically singular."""


class DivergenceError(RuntimeError):
    """An iterative solver produced a non-finite cost."""


class TuningError(RuntimeError):
    """Hyperparameter tuning failed in every start."""


class DegenerateInputError(ValueError):
    """A statistical test received an input with no variability."""
