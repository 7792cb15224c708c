"""
Exception hierarchy for epical
"""

from typing import Any, Optional


class CalibrationError(Exception):
    """Base class for every error raised by epical"""


class InvalidInputError(CalibrationError, ValueError):
    """An argument violates a documented precondition"""


class InsufficientDataError(CalibrationError):
    """Too few matches to run the requested estimation"""


class DegenerateGeometryError(CalibrationError):
    """The configuration is unobservable or numerically singular

    Attributes:
        best_estimate: the best estimate reached before the failure, if any
    """

    def __init__(self, message: str, best_estimate: Optional[Any] = None):
        super().__init__(message)
        self.best_estimate = best_estimate


class StepTooLargeError(DegenerateGeometryError):
    """A retraction step left the unit sphere"""


class NotVisibleError(CalibrationError):
    """A simulated point is not in front of both cameras"""


class ConfigurationError(CalibrationError, ValueError):
    """Invalid configuration document or value"""


class DataFormatError(CalibrationError, ValueError):
    """Malformed input file

    Attributes:
        path: file being parsed
        line: 1-based line number of the offending row, if known
    """

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line
