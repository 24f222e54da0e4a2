"""Exception hierarchy shared by every module."""


class LstmtError(Exception):
    """Base class for all package errors."""


class DimensionError(LstmtError, ValueError):
    pass


class ContractError(LstmtError, ValueError):
    """A documented precondition was violated."""


class NumericalError(LstmtError, ArithmeticError):
    """NaN or Inf appeared during a forward or backward pass."""


class VocabularyError(LstmtError, ValueError):
    pass


class EmptySequenceError(LstmtError, ValueError):
    pass


class ConfigError(LstmtError, ValueError):
    pass


class DataError(LstmtError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class SchemaError(DataError):
    pass


class CheckpointError(LstmtError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
