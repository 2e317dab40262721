"""Exception hierarchy shared by services and commands.

Each error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class MdidError(Exception):
    exit_code = 1


class ParameterError(MdidError):
    """Inadmissible data-generating parameters."""


class PanelFormatError(MdidError):
    def __init__(self, message: str, row: Optional[int] = None) -> None:
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class PanelValidationError(MdidError):
    """Panel violates the balanced-panel or group-size requirements."""


class MatchingError(MdidError):
    pass


class ConfigurationError(MdidError):
    pass


class NumericalError(MdidError):
    exit_code = 2

    def __init__(self, message: str, condition_number: Optional[float] = None) -> None:
        self.condition_number = condition_number
        if condition_number is not None:
            message = f"{message} (condition number {condition_number:.3e})"
        super().__init__(message)


class ReplicateError(MdidError):
    exit_code = 2

    def __init__(self, message: str, replicate: Optional[int] = None) -> None:
        self.replicate = replicate
        if replicate is not None:
            message = f"replicate {replicate}: {message}"
        super().__init__(message)
