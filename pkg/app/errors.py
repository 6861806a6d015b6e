"""Exception hierarchy shared by every LWM role.

Errors are grouped by the layer that raises them so callers can catch a whole
family (``VerifyError``, ``NotifierError``...) or a single condition.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from app.roles.subject import Evidence


class LWMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LWMError, ValueError):
    """Raised when a setting is missing or has an invalid value."""


class MalformedName(LWMError, ValueError):
    """Raised when a subject name cannot be normalized."""


class DuplicateName(LWMError, ValueError):
    """Raised when a batch contains the same subject name twice."""


class CodecError(LWMError, ValueError):
    """Raised when a wire encoding or stored record cannot be decoded."""


class VerifyError(LWMError):
    """Base class for wild-card proof verification failures."""


class OrderViolation(VerifyError):
    """Proof leaves are not strictly Ω-ordered or sit on the wrong side of the query."""


class BoundaryMissing(VerifyError):
    """Boundary presence or indices disagree with the claimed match range."""


class RootMismatch(VerifyError):
    """The reconstructed root differs from the snapshot root."""


class SizeMismatch(VerifyError):
    """The proof was made for a tree of a different size."""


class LogError(LWMError):
    """Base class for errors raised by the log."""


class RateLimited(LogError):
    """An STH was requested before the STH frequency allows it."""


class RangeError(LogError, IndexError):
    """Requested entries, STH index or proof sizes are out of bounds."""


class NotifierError(LWMError):
    """Base class for errors raised by the notifier."""


class LogUnreachable(NotifierError):
    """The log endpoint could not be reached."""


class NotifierUnreachable(NotifierError):
    """The notifier endpoint could not be reached."""


class IndexGapUnfillable(NotifierError):
    """The log refused to serve an STH index that should exist."""


class SnapshotMismatch(NotifierError):
    """A rebuilt batch tree does not match the STH's lwm extension."""


class BatchEvicted(NotifierError):
    """The batch for the requested STH index is no longer cached."""


class BatchUnavailable(NotifierError):
    """The notifier has not cached a batch for the requested STH index."""


class UnknownSubscription(NotifierError, KeyError):
    """No subscription exists with the given id."""


class MalformedRecord(LWMError, ValueError):
    """Raised when an evidence record cannot be parsed."""


class Rejection(LWMError):
    """A notification failed subject verification.

    Attributes:
        evidence: The evidence record appended to the subject's journal.
    """

    def __init__(self, message: str, evidence: Evidence) -> None:
        super().__init__(message)
        self.evidence = evidence

    @property
    def kind(self) -> str:
        return self.evidence.kind.value


class NotBootstrapped(LWMError, RuntimeError):
    """A subject was asked to verify before it trusted any STH."""
