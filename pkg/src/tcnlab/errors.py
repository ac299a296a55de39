"""Exception types shared across the package."""


class TcnLabError(Exception):
    pass


class ShapeError(TcnLabError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigError(TcnLabError, ValueError):
    """Invalid hyperparameter or configuration value."""


class DataError(TcnLabError, ValueError):
    """Input data violates a record, sample or label invariant."""


class FormatError(TcnLabError, ValueError):
    """A checkpoint or cohort file cannot be parsed or validated."""


class GradCheckError(TcnLabError, ArithmeticError):
    """Function under gradient check produced a non-finite value."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class TrainingDiverged(TcnLabError, ArithmeticError):
    """Loss became non-finite during fitting."""
