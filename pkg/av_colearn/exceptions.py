"""Error hierarchy. Every error carries the process exit code the CLI reports for it."""


class ColearnError(Exception):
    exit_code = 1


class ConfigurationError(ColearnError):
    """Bad settings. Shares exit code 2 with command-line usage errors."""

    exit_code = 2


class StagingError(ColearnError):
    exit_code = 3


class NumericalError(ColearnError):
    """Raised when a loss or gradient turns non-finite.

    ``diagnostics`` holds the loss breakdown (or other context) at the time of the
    failure and ``last_good`` the path of the last checkpoint written, when there is one.
    """

    exit_code = 4

    def __init__(self, message, diagnostics=None, last_good=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.last_good = last_good


class IngestionError(ColearnError):
    exit_code = 5

    def __init__(self, message, entry=None):
        if entry is not None:
            message = f"{entry}: {message}"
        super().__init__(message)
        self.entry = entry


class InputError(ColearnError, ValueError):
    exit_code = 6


class ContractViolation(ColearnError):
    exit_code = 7


class CheckpointError(ColearnError):
    exit_code = 8


class EvaluationError(ColearnError):
    exit_code = 9
