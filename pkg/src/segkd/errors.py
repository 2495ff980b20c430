"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: validation errors exit 2,
missing upstream artifacts exit 3, numerical aborts exit 4.
"""

from __future__ import annotations


class SegKDError(Exception):
    """Base class for all package errors."""


class ValidationError(SegKDError, ValueError):
    """Bad input: shapes, ranges, malformed files, contract violations."""


class IntegrityError(SegKDError):
    """Persisted artifact failed its checksum or structural check."""


class MissingArtifactError(SegKDError):
    """A required upstream artifact does not exist.

    The message names the command that produces it.
    """


class NumericalAbortError(SegKDError):
    """Training hit a non-finite loss and was aborted."""

    def __init__(self, message: str, last_good_checkpoint: str | None = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
