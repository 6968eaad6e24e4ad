"""Exception types shared across the pipeline stages."""


class GclmoError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(GclmoError, ValueError):
    """Invalid hyperparameter, count, or unknown configuration key."""

    exit_code = 2


class InputError(GclmoError):
    """A named input file is missing or malformed."""

    exit_code = 3

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ContractViolation(GclmoError, ValueError):
    """A caller broke a documented precondition (empty mask, length mismatch, ...)."""


class NumericalError(GclmoError, FloatingPointError):
    """NaN or Inf detected during training; carries a diagnostic state dump."""

    exit_code = 4

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
