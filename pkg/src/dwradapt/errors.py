"""Exception types shared across the toolkit.

Separate classes keep caller-side handling honest: usage mistakes are
distinguishable from numerical failures, and the latter carry the solver
report where one exists.
"""


class UsageError(Exception):
    """Raised when an operation is called with inconsistent arguments."""


class DomainError(ValueError):
    """Raised when geometric input is invalid (point outside domain, ...)."""


class DataError(ValueError):
    """Raised when problem data cannot be evaluated where it is needed."""


class SolverError(Exception):
    """Raised when a linear or nonlinear solve fails fatally.

    The ``report`` attribute holds the :class:`dwradapt.linalg.SolverReport`
    of the failed solve when available.
    """

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class ShiftRejectedError(SolverError):
    """Raised when a spectral shift makes the shifted system near-singular."""


class UnsupportedSpectrumError(SolverError):
    """Raised when the eigensolver detects a complex pair (real arithmetic only)."""


class NormalizationError(SolverError):
    """Raised when primal/adjoint eigenvectors cannot be bi-normalized."""
