"""Exception hierarchy shared by the library and the CLI."""


class VimputeError(Exception):
    """Base class for all package errors."""


class ShapeError(VimputeError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(VimputeError):
    """A call violated an API precondition."""


class DataError(VimputeError):
    """Input data is malformed or unusable."""


class ParseError(DataError):
    def __init__(self, message: str, path=None, row=None, column=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        prefix = ":".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.row = row
        self.column = column


class InfeasibleMaskError(DataError):
    def __init__(self, message: str, achievable_rate: float):
        super().__init__(f"{message} (achievable rate {achievable_rate:.4f})")
        self.achievable_rate = achievable_rate


class CheckpointError(DataError):
    """Checkpoint is truncated, of an unknown version, or of the wrong variant."""


class NumericError(VimputeError, ArithmeticError):
    """A loss or gradient became non-finite."""
