"""
Exception hierarchy for the emulation library.

Library code raises these; the command-line entry point maps each class to an
exit code (see ``bayhem.cli.EXIT_CODES``).
"""

from typing import Any, Dict, List, Optional, Tuple


class BayHEmError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(BayHEmError, ValueError):
    """Dimension mismatch, bad lengths, bad option values or out-of-domain inputs."""


class DataError(InvalidArgumentError):
    """
    Malformed input file.

    Args:
        message: What is wrong with the file.
        path: File the problem was found in.
        row: 1-based row number counted from the header row, when known.
    """

    def __init__(self, message: str, path: Optional[str] = None, row: Optional[int] = None):
        self.path = path
        self.row = row
        where = ""
        if path is not None:
            where = f"{path}"
            if row is not None:
                where += f", row {row}"
            where += ": "
        super().__init__(f"{where}{message}")


class NumericalError(BayHEmError, ArithmeticError):
    """
    A covariance matrix could not be factorized.

    Args:
        message: Description of the failure.
        hyperparams: The hyperparameters in use when the factorization failed.
        collisions: Pairs of coinciding design points that make the matrix singular.
    """

    def __init__(
        self,
        message: str,
        hyperparams: Optional[Dict[str, Any]] = None,
        collisions: Optional[List[Tuple[Tuple[float, ...], Tuple[float, ...]]]] = None,
    ):
        self.hyperparams = hyperparams
        self.collisions = collisions or []
        details = ""
        if hyperparams is not None:
            details += f" (hyperparams: {hyperparams})"
        if self.collisions:
            shown = ", ".join(f"{a} == {b}" for a, b in self.collisions[:5])
            details += f" (colliding points: {shown})"
        super().__init__(f"{message}{details}")


class FitError(BayHEmError):
    """Hyperparameter fitting failed; ``level`` is the 1-based level index when known."""

    def __init__(self, message: str, level: Optional[int] = None):
        self.level = level
        prefix = f"level {level}: " if level is not None else ""
        super().__init__(f"{prefix}{message}")


class UnsupportedOperationError(BayHEmError, NotImplementedError):
    """The requested operation is not defined for this model."""


class ModelFormatError(BayHEmError):
    """A model file has an unknown format or version."""
