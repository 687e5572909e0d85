"""Exception types shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class ContractError(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ContractError):
    """Input values fall outside an operation's numeric domain."""


class ConfigError(ValueError):
    """Invalid configuration or command-line flags."""


class DataError(ValueError):
    """A data file is missing or malformed."""

    def __init__(self, message, file=None, line=None):
        loc = ""
        if file is not None:
            loc = f" [{file}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + loc)
        self.file = file
        self.line = line


class NumericError(RuntimeError):
    """Training or evaluation produced non-finite values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
