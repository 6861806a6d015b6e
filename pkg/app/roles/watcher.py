"""Pull loop of one subject: notifier first, full batch from the log as fallback."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from app.errors import (
    BatchEvicted,
    BatchUnavailable,
    LWMError,
    RangeError,
    Rejection,
    SnapshotMismatch,
    UnknownSubscription,
)
from app.roles.follower import LogEndpoint
from app.roles.notifier import Notification
from app.roles.subject import EvidenceKind, Match, Subject
from app.utils.journal import read_json, write_json_atomic
from app.utils.typing import SubscriptionModel

logger = logging.getLogger(__name__)

SUBSCRIPTION_FILE = "subscription.json"

# Kinds proven by the log's own signature.
LOG_MISBEHAVIOUR = {
    EvidenceKind.MALFORMED_EXTENSIONS,
    EvidenceKind.INDEX_REPLAY,
    EvidenceKind.STALE_TIMESTAMP,
    EvidenceKind.SNAPSHOT_MISMATCH,
    EvidenceKind.INCONSISTENT_STHS,
}
# Kinds the notifier can cause; the log serves the batch instead.
NOTIFIER_MISBEHAVIOUR = {
    EvidenceKind.BAD_SIGNATURE,
    EvidenceKind.INDEX_GAP,
    EvidenceKind.PROOF_INVALID,
}


class NotificationSource(Protocol):
    def whats_new(self, subscription_id: str, since_index: int) -> list[Notification]: ...

    def notify(self, subscription_id: str, sth_index: int) -> Notification: ...


class HasId(Protocol):
    @property
    def id(self) -> str: ...


class SubscriptionService(NotificationSource, Protocol):
    def subscribe(self, query: str, apex_included: bool = ..., *, since_index: int | None = ...) -> HasId: ...


def resume_subscription(notifier: SubscriptionService, subject: Subject, state_dir: Path) -> str:
    """Returns the subscription id kept in ``state_dir`` if the notifier still knows it.

    Otherwise subscribes from the subject's next index and keeps the new id.
    """
    path = Path(state_dir) / SUBSCRIPTION_FILE
    since = subject.expected_next_index - 1
    query = subject.query
    raw = read_json(path)
    if raw is not None:
        stored = SubscriptionModel.model_validate(raw)
        if stored.query == query.raw and stored.apex_included == query.apex_included:
            try:
                notifier.whats_new(stored.id, since)
                return stored.id
            except BatchEvicted:
                return stored.id
            except UnknownSubscription:
                logger.info(f"Notifier no longer knows subscription {stored.id}, subscribing again")
    sub = notifier.subscribe(query.raw, query.apex_included, since_index=since)
    model = SubscriptionModel(
        id=sub.id, query=query.raw, apex_included=query.apex_included, last_acknowledged_index=since
    )
    write_json_atomic(path, model.model_dump(mode="json"))
    return sub.id


@dataclass
class SubjectWatcher:
    """Keeps one subject in sync.

    The log is used only for indices the notifier cannot serve: an evicted
    or tombstoned batch, or an index the notifier skipped. An index the
    notifier has not published yet is waited for.
    """

    subject: Subject
    notifier: NotificationSource
    subscription_id: str
    log: LogEndpoint
    halted: bool = False
    matches: list[Match] = field(default_factory=list)

    def sync(self) -> list[Match]:
        """Verifies everything available. Returns the newly accepted matches."""
        found: list[Match] = []
        while not self.halted:
            before = self.subject.expected_next_index
            needs_log = self._pull(found)
            if needs_log and not self.halted:
                self._fallback(found)
            if self.subject.expected_next_index == before:
                break
        self.matches.extend(found)
        return found

    def _pull(self, found: list[Match]) -> bool:
        since = self.subject.expected_next_index - 1
        try:
            notifications = self.notifier.whats_new(self.subscription_id, since)
        except BatchEvicted as e:
            logger.info(f"Notifier cannot serve after {since}: {e}")
            return True
        for notification in notifications:
            try:
                found.extend(self.subject.verify_notification(notification))
            except Rejection as e:
                logger.warning(f"Rejected notification {notification.sth_index} for {self.subject.query}: {e}")
                return self._rejected(e)
        if notifications:
            return False
        try:
            pending = self.notifier.notify(self.subscription_id, self.subject.expected_next_index)
        except BatchUnavailable:
            # Not published by the notifier yet; a later index reveals a skip.
            return False
        except (BatchEvicted, SnapshotMismatch):
            return True
        try:
            found.extend(self.subject.verify_notification(pending))
        except Rejection as e:
            logger.warning(f"Rejected notification {pending.sth_index} for {self.subject.query}: {e}")
            return self._rejected(e)
        return False

    def _rejected(self, e: Rejection) -> bool:
        """Halts on log misbehaviour. Returns whether to read the batch from the log."""
        self.halted = e.evidence.kind in LOG_MISBEHAVIOUR
        return e.evidence.kind in NOTIFIER_MISBEHAVIOUR

    def _fallback(self, found: list[Match]) -> None:
        expected = self.subject.expected_next_index
        previous = self.subject.state.accepted.get(expected - 1)
        try:
            sth = self.log.get_sth_at(expected)
        except RangeError:
            # The notifier served a later index, so the log skipped this one.
            logger.error(f"Log cannot serve index {expected}, stopping")
            self.halted = True
            return
        if previous is None or sth.tree_size < previous.tree_size:
            logger.warning(f"Cannot download batch {expected} without its predecessor")
            return
        try:
            entries = self.log.get_entries(previous.tree_size, sth.tree_size)
            found.extend(self.subject.verify_batch(sth, entries))
        except Rejection as e:
            logger.error(f"Batch {expected} failed verification: {e}")
            self.halted = e.evidence.kind in LOG_MISBEHAVIOUR
        except LWMError as e:
            logger.warning(f"Fallback for batch {expected} failed: {e}")

    def run(self, stop: threading.Event, period_s: float) -> None:
        while not stop.is_set() and not self.halted:
            try:
                self.sync()
            except LWMError as e:
                logger.warning(f"Sync failed: {e}")
            stop.wait(period_s)
