"""Exception types shared across the package."""


class MahaError(Exception):
    """Base class for all package errors."""


class ShapeError(MahaError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MahaError, ValueError):
    """A configuration value is invalid or infeasible."""


class EvaluationError(MahaError, ArithmeticError):
    """A computation produced non-finite values."""


class DivergenceError(MahaError, RuntimeError):
    """Training diverged (non-finite or exploding loss)."""

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss
