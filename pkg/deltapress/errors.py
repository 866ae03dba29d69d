"""
Error hierarchy for deltapress.

Library code raises these; the CLI maps ``exit_code`` onto the process exit
status (0 success, 1 user error, 2 data corruption, 3 numeric failure).
"""
from __future__ import annotations

from typing import Iterable, Optional

EXIT_OK = 0
EXIT_USER = 1
EXIT_CORRUPT = 2
EXIT_NUMERIC = 3


class DeltaPressError(Exception):
    exit_code = EXIT_USER


class ConfigError(DeltaPressError):
    pass


class RankError(DeltaPressError):
    pass


class ArchitectureMismatchError(DeltaPressError):
    def __init__(self, message: str, names: Iterable[str] = ()):
        self.names = list(names)
        if self.names:
            message = f"{message}: {', '.join(self.names)}"
        super().__init__(message)


class EmptyInputError(DeltaPressError):
    pass


class DegenerateBaselineError(DeltaPressError):
    pass


class UnsupportedDtypeError(DeltaPressError):
    pass


class IoError(DeltaPressError):
    pass


class FormatError(DeltaPressError):
    exit_code = EXIT_CORRUPT


class CorruptTensorError(DeltaPressError):
    exit_code = EXIT_CORRUPT


class CorruptEntryError(DeltaPressError):
    exit_code = EXIT_CORRUPT

    def __init__(self, message: str, name: Optional[str] = None):
        self.name = name
        if name is not None:
            message = f"{name}: {message}"
        super().__init__(message)


class BaseMismatchError(DeltaPressError):
    exit_code = EXIT_CORRUPT

    def __init__(self, expected: str, actual: str):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"base fingerprint mismatch: container expects {expected}, got {actual}"
        )


class ShapeError(DeltaPressError):
    exit_code = EXIT_CORRUPT


class NumericError(DeltaPressError):
    exit_code = EXIT_NUMERIC


class ConvergenceError(NumericError):
    def __init__(self, message: str, iterations: int):
        self.iterations = iterations
        super().__init__(f"{message} (after {iterations} iterations)")


class BudgetWarning(UserWarning):
    """Raised through ``warnings.warn`` when a rank had to be clamped."""
