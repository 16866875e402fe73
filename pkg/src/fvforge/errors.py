"""Exception hierarchy shared by all fvforge modules.

Every error class carries the process exit code the CLI maps it to:
2 for bad parameters/usage, 3 for data and format problems, 4 for
numerical failures.
"""


class FvForgeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ParameterError(FvForgeError):
    """An argument value violates an operation's precondition."""

    exit_code = 2


class DataError(FvForgeError):
    """Input data is malformed, inconsistent, or non-finite."""

    exit_code = 3


class FormatError(DataError):
    """A file does not conform to the expected on-disk format."""


class CorruptionError(DataError):
    """A file's declared shape disagrees with its payload."""


class ValidationError(DataError):
    """A manifest or model header violates its invariants."""


class ShapeError(DataError):
    """Two values that must agree in dimension do not."""


class UndefinedApError(DataError):
    """Average precision requested for a class with zero positives."""


class NumericError(FvForgeError):
    """A numerical routine failed (eigen-solve, EM regression, non-finite result)."""

    exit_code = 4
