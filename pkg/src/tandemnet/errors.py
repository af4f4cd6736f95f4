"""Exception types shared across the package.

Each error carries an ``exit_code`` so the command line can map failures to
process exit statuses without inspecting messages.
"""


class TandemError(Exception):
    exit_code = 1


class DimensionError(TandemError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 3


class NumericError(TandemError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 4


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    exit_code = 4


class ConfigError(TandemError, ValueError):
    """A configuration invariant is violated."""

    exit_code = 3

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class FormatError(TandemError, IOError):
    """A file on disk does not match the expected layout."""

    exit_code = 5

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class InputError(TandemError, ValueError):
    """Caller supplied unusable input (e.g. an empty corpus)."""

    exit_code = 3
