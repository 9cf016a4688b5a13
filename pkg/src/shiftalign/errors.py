"""Exception types shared across the package."""


class ShiftAlignError(Exception):
    """Base class for all package errors."""


class DimensionError(ShiftAlignError, ValueError):
    """Array shapes do not line up."""


class DomainError(ShiftAlignError, ValueError):
    """Argument outside the domain of an operation (empty batch, bad level...)."""


class ConfigurationError(ShiftAlignError, ValueError):
    """Invalid model, dataset or experiment configuration."""


class StateError(ShiftAlignError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class NumericalError(ShiftAlignError, ArithmeticError):
    """A non-finite value was produced where a finite one is required."""


class WarmupError(ShiftAlignError, RuntimeError):
    """The label-shift estimator has not yet seen every source class."""


class UndefinedPredictionError(ShiftAlignError, ValueError):
    """Posterior correction left a row with zero total mass."""

    def __init__(self, rows):
        self.rows = list(rows)
        super().__init__(f"corrected posterior undefined for rows {self.rows[:10]}"
                         + (" ..." if len(self.rows) > 10 else ""))


class InsufficientDataError(ShiftAlignError, ValueError):
    """Not enough samples to compute a statistic."""


class IncompleteReportError(ShiftAlignError, RuntimeError):
    """A scenario report is missing replicates."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"report incomplete, missing replicates: {self.missing}")
