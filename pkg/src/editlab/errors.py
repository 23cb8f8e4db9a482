"""Exception types raised across the package."""


class EditLabError(Exception):
    """Base class for every error raised by editlab."""


# toy model
class EmptyInput(EditLabError, ValueError):
    pass


class SeqTooLong(EditLabError, ValueError):
    pass


class BadToken(EditLabError, ValueError):
    pass


class BadLocation(EditLabError, ValueError):
    pass


class ShapeError(EditLabError, ValueError):
    pass


# editing
class OptimizationDiverged(EditLabError, ArithmeticError):
    pass


class NumericalError(EditLabError, ArithmeticError):
    pass


# metrics / stats
class EmptyDataset(EditLabError, ValueError):
    pass


class MissingCounterfactual(EditLabError, ValueError):
    pass


class ModelMismatch(EditLabError, ValueError):
    pass


class BadK(EditLabError, ValueError):
    pass


class BadIndicator(EditLabError, ValueError):
    pass


class LabelMismatch(EditLabError, ValueError):
    pass


class DegenerateWarning(UserWarning):
    """Emitted when a statistic is undefined (e.g. Kendall's tau of an all-tied series)."""


# harness
class DatasetError(EditLabError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingParaphrases(EditLabError, ValueError):
    pass


class MissingGroundTruth(EditLabError, ValueError):
    pass


class IoError(EditLabError, OSError):
    pass


class ConfigError(EditLabError, ValueError):
    pass
