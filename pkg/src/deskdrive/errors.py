"""Exception hierarchy shared across the package.

Every error raised by deskdrive derives from :class:`DeskDriveError`, so
callers (and the CLI) can separate our failures from genuine bugs.
"""

from __future__ import annotations


class DeskDriveError(Exception):
    """Base class for all deskdrive errors."""


class ParseError(DeskDriveError):
    """A file could not be parsed; message carries line/field context."""


class ValidationError(DeskDriveError):
    """A domain invariant is violated; message names the invariant."""


class IoError(DeskDriveError):
    """Reading or writing a file failed."""


class UnknownObject(DeskDriveError):
    """Object id not present in the scene."""


class FuzzFailed(DeskDriveError):
    """No valid placement found within the attempt budget."""


class NotAFailure(DeskDriveError):
    """Exploring-tree mining requires a log that ended in a failure."""


class DegenerateTrajectory(DeskDriveError):
    """All trajectory points coincide; no direction can be extracted."""


class DegenerateRange(DeskDriveError):
    """Truncation interval carries numerically zero probability mass."""


class OutOfRange(DeskDriveError):
    """Queried point lies outside the truncation interval."""


class BadAnchors(DeskDriveError):
    """Anchor list too short or timestamps not increasing."""


class ShapeMismatch(DeskDriveError):
    """Tensor or image shape differs from the network specification."""


class SpecMismatch(DeskDriveError):
    """Parameter file was written for a different network specification."""


class LengthMismatch(DeskDriveError):
    """Sequence lengths disagree (rewards vs. values, etc.)."""


class NonFinite(DeskDriveError):
    """A loss or gradient became NaN/Inf; the update must be dropped."""


class EmptyDataset(DeskDriveError):
    """Behavior cloning needs at least one sample."""


class EmptyBuffer(DeskDriveError):
    """Cannot sample from an empty replay buffer."""


class WorkerFailure(DeskDriveError):
    """An episode worker failed after its retry."""
