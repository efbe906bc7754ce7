"""Exception hierarchy shared across the package."""


class FenaError(Exception):
    """Base class for all package errors."""


class ShapeError(FenaError, ValueError):
    """Raised when operand shapes disagree; never broadcast silently."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        shp = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shp}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(FenaError, ArithmeticError):
    """Non-finite values, failed factorizations, unstable integrations."""


class ResonanceError(NumericError):
    """Excitation frequency too close to a natural frequency."""


class ConfigError(FenaError, ValueError):
    """Invalid configuration, preset or argument."""


class DatasetFormatError(FenaError, IOError):
    """Base class for persistence format problems."""


class FormatVersionError(DatasetFormatError):
    pass


class TruncatedBlobError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class EnsembleTrainingError(FenaError):
    """Some ensemble members failed; ``survivors`` holds the ones that trained."""

    def __init__(self, msg, survivors, failures):
        super().__init__(msg)
        self.survivors = survivors
        self.failures = failures
