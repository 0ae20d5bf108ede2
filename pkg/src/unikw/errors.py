"""Exception hierarchy shared across the package.

Library code raises :class:`ValidationError` for bad inputs or malformed
files, :class:`ConsistencyError` for violations of internal invariants
(e.g. mismatched components assembled into one engine), and
:class:`TrainingDiverged` when optimization produces non-finite losses.
Plain I/O failures propagate as ``OSError``.
"""


class UnikwError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(UnikwError, ValueError):
    """Invalid argument, malformed input data, or corrupted file."""


class ConsistencyError(UnikwError, RuntimeError):
    """Internal invariant violated; indicates inconsistent components."""


class TrainingDiverged(UnikwError, RuntimeError):
    """Training produced a non-finite loss."""
