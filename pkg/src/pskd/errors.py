"""Exception types shared across the package."""

from __future__ import annotations


class PSKDError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PSKDError, ValueError):
    """Array dimensions do not line up."""


class ParameterError(PSKDError, ValueError):
    """A hyperparameter is outside its admissible range."""


class InputError(PSKDError, ValueError):
    """Input data is invalid (out-of-range label, empty set, non-finite value)."""


class FormatError(PSKDError, ValueError):
    """A file on disk is malformed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class SingularityError(PSKDError, ArithmeticError):
    """The rescaling factor is undefined because the target probability is exactly 1."""


class CacheMissError(PSKDError, KeyError):
    """A teacher prediction was requested for an example that was never recorded."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "cache miss"


class NoTeacherError(PSKDError, LookupError):
    """No epoch-(t-1) teacher exists yet (first epoch); callers fall back to hard targets."""


class TrainingAborted(PSKDError, RuntimeError):
    """Training stopped: non-finite loss or missing teacher prediction."""
