"""
Exception hierarchy for the pGLMM toolkit.
Every error raised on purpose by this package derives from PglmmError and
carries a human-readable ``message``.
"""
from typing import Any, Dict, List, Optional


class PglmmError(Exception):
    """Base exception for errors raised by the toolkit."""
    def __init__(self, message: str, *args):
        super().__init__(message, *args)
        self.message = message


class ContractViolationError(PglmmError, ValueError):
    """Raised when inputs break a documented precondition (shapes, dimensions, ranges)."""


class InvalidResponseError(PglmmError, ValueError):
    """Raised when response values are not valid for the model family."""


class UnsupportedConfigurationError(PglmmError):
    """Raised for parameter combinations the solvers cannot handle."""


class SamplerInitializationError(PglmmError):
    """Raised when a posterior chain cannot start from a finite likelihood."""


class DivergenceError(PglmmError):
    """Raised when the EM objective keeps increasing beyond Monte Carlo noise."""
    def __init__(self, message: str, q1_trace: Optional[List[float]] = None):
        super().__init__(message)
        self.q1_trace = list(q1_trace or [])


class SeparationError(PglmmError):
    """Raised when an unpenalized logistic fit separates or becomes unstable."""


class GridSearchError(PglmmError):
    """Raised when every point of a tuning grid failed."""
    def __init__(self, message: str, diagnostics: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class DataParseError(PglmmError, ValueError):
    """Raised for malformed tabular input; records where the problem is."""
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[str] = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.line = line
        self.column = column


class GeneLookupError(PglmmError, KeyError):
    """Raised when a requested gene is missing from an expression study."""
    def __init__(self, gene: str, study_id: str):
        super().__init__(f"Gene '{gene}' not found in study '{study_id}'")
        self.gene = gene
        self.study_id = study_id

    def __str__(self) -> str:
        return self.message


def format_error(error: Exception) -> str:
    """
    Format error message for better debugging and logging.

    Args:
        error (Exception): The raised exception.

    Returns:
        str: Formatted error message.
    """
    if hasattr(error, 'message'):
        return f"[{error.__class__.__name__}] {error.message}"
    return f"[{error.__class__.__name__}] {str(error)}"
