"""Exception types raised across the package."""


class RotorWalkError(Exception):
    pass


class InvalidLaw(RotorWalkError, ValueError):
    pass


class MissingRow(InvalidLaw):
    pass


class DegenerateConditioning(RotorWalkError, ValueError):
    pass


class NonConvergence(RotorWalkError, ArithmeticError):
    pass


class NotTransient(RotorWalkError, ValueError):
    pass


class NotPositiveRecurrent(RotorWalkError, ValueError):
    pass


class MemoryBudgetExceeded(RotorWalkError, MemoryError):
    pass


class StepCapReached(RotorWalkError):
    """Raised in strict mode when a walk stops before its requested returns."""

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


class InsufficientSample(RotorWalkError, ValueError):
    pass


class GridTooLarge(RotorWalkError, ValueError):
    pass


class ConfigError(RotorWalkError, ValueError):
    pass
