"""Exception hierarchy shared across the package.

The CLI maps each category onto an exit code, so library code raises the most
specific class available instead of bare ValueError/RuntimeError.
"""


class ProtoXError(Exception):
    exit_code = 1


class ConfigurationError(ProtoXError, ValueError):
    exit_code = 2


class DependencyError(ProtoXError, FileNotFoundError):
    exit_code = 3


class NumericError(ProtoXError, ArithmeticError):
    exit_code = 4


class StateError(ProtoXError, RuntimeError):
    """Operation invoked on an object in the wrong lifecycle state."""


class ShapeError(ProtoXError, ValueError):
    pass


class FormatError(ProtoXError, ValueError):
    """A binary artifact could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SplitError(ProtoXError, ValueError):
    pass


class DataError(ProtoXError, ValueError):
    pass


class EvaluationError(ProtoXError, ValueError):
    pass
