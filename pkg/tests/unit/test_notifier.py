import threading
from dataclasses import replace
from pathlib import Path
from typing import Any

import pytest

from app.config import LogSettings, NotifierSettings, SubjectSettings
from app.core.hashcore import Digest
from app.core.sth import LogEntry, SignedTreeHead
from app.errors import (
    BatchEvicted,
    BatchUnavailable,
    CodecError,
    LogUnreachable,
    Rejection,
    SnapshotMismatch,
    UnknownSubscription,
)
from app.roles.log import CTLog, LogFault
from app.roles.notifier import Notification, Notifier, NotifierFault
from app.roles.subject import EvidenceKind, Subject, verify_evidence

INTERVAL = 1_000
T0 = 1_700_000_000_000
QUERY = "*.example.com"


class TamperedLog:
    """Serves ``log`` unchanged until one of its switches is set."""

    def __init__(self, log: CTLog) -> None:
        self.log = log
        self.failure: Exception | None = None
        self.bad_subjects = False
        self.stripped: set[int] = set()

    def get_sth(self) -> SignedTreeHead:
        if self.failure is not None:
            raise self.failure
        return self.log.get_sth()

    def get_sth_at(self, index: int) -> SignedTreeHead:
        sth = self.log.get_sth_at(index)
        return replace(sth, extensions=()) if index in self.stripped else sth

    def get_entries(self, start: int, end: int) -> list[LogEntry]:
        entries = self.log.get_entries(start, end)
        if self.bad_subjects:
            return [replace(e, subject="bad..name") for e in entries]
        return entries

    def consistency_proof(self, first: int, second: int) -> list[Digest]:
        return self.log.consistency_proof(first, second)


class StopAfter(threading.Event):
    """Records every wait of ``Notifier.run`` and stops it after ``rounds``."""

    def __init__(self, rounds: int) -> None:
        super().__init__()
        self.rounds = rounds
        self.waits: list[float | None] = []

    def wait(self, timeout: float | None = None) -> bool:
        self.waits.append(timeout)
        if len(self.waits) >= self.rounds:
            self.set()
        return self.is_set()


class World:
    def __init__(self, **notifier: Any) -> None:
        self.log = CTLog(LogSettings(interval_ms=INTERVAL))
        self.endpoint = TamperedLog(self.log)
        self.notifier = Notifier(self.endpoint, NotifierSettings(interval_ms=INTERVAL, **notifier))
        self.t = T0
        self.log.issue_sth(self.t)
        self.notifier.poll()

    def interval(self, *names: str, fault: LogFault | None = None) -> None:
        for name in names:
            self.log.submit(name, f"cert:{name}".encode())
        if fault is not None:
            self.log.inject(fault)
        self.t += INTERVAL
        self.log.issue_sth(self.t)
        self.notifier.poll()

    def subject(self, **settings: Any) -> Subject:
        subject = Subject(
            self.log.public_key, QUERY, SubjectSettings(**settings), clock=lambda: T0 + 100 * INTERVAL
        )
        subject.bootstrap(self.log.get_sth_at(0))
        return subject


def test_whats_new_serves_verifiable_notifications() -> None:
    world = World()
    sub = world.notifier.subscribe(QUERY)
    world.interval("www.example.com", "example.com", "example.org")
    world.interval("mail.example.com", "x-example.com")
    world.interval("example.net")

    subject = world.subject()
    notifications = world.notifier.whats_new(sub.id, 0)
    assert [n.sth_index for n in notifications] == [1, 2, 3]
    matches = [subject.verify_notification(n) for n in notifications]
    assert matches[0] == [
        ("example.com", (b"cert:example.com",)),
        ("www.example.com", (b"cert:www.example.com",)),
    ]
    assert matches[1] == [("mail.example.com", (b"cert:mail.example.com",))]
    assert matches[2] == []
    assert subject.expected_next_index == 4
    assert sub.last_acknowledged_index == 0


def test_subscribe_starts_at_latest_batch() -> None:
    world = World()
    world.interval("a.example.com")
    sub = world.notifier.subscribe(QUERY)
    assert sub.last_acknowledged_index == 1
    assert world.notifier.whats_new(sub.id, sub.last_acknowledged_index) == []


def test_eviction() -> None:
    world = World(retention=2)
    sub = world.notifier.subscribe(QUERY, since_index=0)
    for name in ("a.example.com", "b.example.com", "c.example.com"):
        world.interval(name)
    assert world.notifier.cache.oldest_index == 2
    with pytest.raises(BatchEvicted):
        world.notifier.notify(sub.id, 0)
    with pytest.raises(BatchEvicted):
        world.notifier.whats_new(sub.id, 0)
    with pytest.raises(BatchUnavailable):
        world.notifier.notify(sub.id, 9)
    assert [n.sth_index for n in world.notifier.whats_new(sub.id, 1)] == [2, 3]


def test_unknown_subscription() -> None:
    world = World()
    with pytest.raises(UnknownSubscription):
        world.notifier.notify("nope", 0)
    with pytest.raises(UnknownSubscription):
        world.notifier.unsubscribe("nope")


def test_failed_audit_leaves_a_tombstone() -> None:
    world = World()
    sub = world.notifier.subscribe(QUERY)
    world.interval("a.example.com")
    world.interval("b.example.com", "c.example.com", fault=LogFault.OMIT_FROM_LWM)
    world.interval("d.example.com")

    (evidence,) = world.notifier.evidence()
    assert evidence.kind is EvidenceKind.SNAPSHOT_MISMATCH
    assert verify_evidence(evidence, world.log.public_key)
    with pytest.raises(SnapshotMismatch):
        world.notifier.notify(sub.id, 2)
    assert [n.sth_index for n in world.notifier.whats_new(sub.id, 0)] == [1]
    assert world.notifier.notify(sub.id, 3).sth_index == 3


def test_audit_off_serves_the_batch() -> None:
    world = World(audit=False)
    sub = world.notifier.subscribe(QUERY)
    world.interval("a.example.com", "b.example.com", fault=LogFault.OMIT_FROM_LWM)
    assert world.notifier.evidence() == []
    assert world.notifier.notify(sub.id, 1).sth_index == 1


def test_skipped_notification_is_an_index_gap() -> None:
    world = World()
    sub = world.notifier.subscribe(QUERY)
    world.notifier.inject(NotifierFault.SKIP_NOTIFICATION)
    world.interval("a.example.com")
    world.interval("b.example.com")
    with pytest.raises(BatchUnavailable):
        world.notifier.notify(sub.id, 1)

    subject = world.subject()
    (notification,) = world.notifier.whats_new(sub.id, 0)
    with pytest.raises(Rejection) as excinfo:
        subject.verify_notification(notification)
    assert excinfo.value.evidence.kind is EvidenceKind.INDEX_GAP
    assert subject.expected_next_index == 1


def test_omitted_match_is_caught() -> None:
    world = World()
    sub = world.notifier.subscribe(QUERY)
    world.interval("a.example.com", "b.example.com", "example.org")
    world.notifier.inject(NotifierFault.OMIT_MATCH)
    notification = world.notifier.notify(sub.id, 1)
    assert len(notification.proof.matches) == 1

    subject = world.subject()
    with pytest.raises(Rejection) as excinfo:
        subject.verify_notification(notification)
    assert excinfo.value.evidence.kind is EvidenceKind.PROOF_INVALID
    assert verify_evidence(excinfo.value.evidence, world.log.public_key)
    assert len(world.notifier.notify(sub.id, 1).proof.matches) == 2


def test_proofs_only() -> None:
    world = World(proofs_only=True)
    sub = world.notifier.subscribe(QUERY)
    world.interval("a.example.com")
    notification = world.notifier.notify(sub.id, 1)
    assert notification.certificates is None

    assert world.subject(require_certificates=False).verify_notification(notification) == [("a.example.com", ())]
    with pytest.raises(Rejection) as excinfo:
        world.subject().verify_notification(notification)
    assert excinfo.value.evidence.kind is EvidenceKind.PROOF_INVALID


def test_push_to_handler_retries_after_failure() -> None:
    world = World()
    received: list[Notification] = []
    refuse = {2}

    def handler(notification: Notification) -> None:
        if notification.sth_index in refuse:
            raise RuntimeError("busy")
        received.append(notification)

    sub = world.notifier.subscribe(QUERY, handler=handler)
    world.interval("a.example.com")
    world.interval("b.example.com")
    world.interval("c.example.com")
    assert world.notifier.push_pending() == 1
    assert sub.last_acknowledged_index == 1

    refuse.clear()
    assert world.notifier.push_pending() == 2
    assert [n.sth_index for n in received] == [1, 2, 3]
    assert world.notifier.push_pending() == 0


def test_log_misbehaviour_is_recorded() -> None:
    world = World()
    world.interval("a.example.com")
    world.interval("b.example.com", fault=LogFault.SKIP_INDEX)
    world.interval("c.example.com", fault=LogFault.REPLAY_INDEX)
    kinds = [e.kind for e in world.notifier.evidence()]
    assert kinds == [EvidenceKind.INDEX_GAP, EvidenceKind.INCONSISTENT_STHS]
    for evidence in world.notifier.evidence():
        assert verify_evidence(evidence, world.log.public_key)


def test_notification_model_keeps_the_wire_proof() -> None:
    world = World()
    sub = world.notifier.subscribe(QUERY)
    world.interval("a.example.com")
    notification = world.notifier.notify(sub.id, 1)
    assert Notification.from_model(notification.to_model()) == notification


def test_restart_restores_subscriptions(tmp_path: Path) -> None:
    log = CTLog(LogSettings(interval_ms=INTERVAL))
    settings = NotifierSettings(interval_ms=INTERVAL, retention=4, state_path=tmp_path / "notifier.json")
    notifier = Notifier.open(log, settings)
    log.issue_sth(T0)
    notifier.poll()
    sub = notifier.subscribe(QUERY)
    for t in range(1, 4):
        log.submit(f"h{t}.example.com", b"c")
        log.issue_sth(T0 + t * INTERVAL)
        notifier.poll()

    restarted = Notifier.open(log, settings)
    assert restarted.follower.next_index == 0
    assert list(restarted.subscriptions) == [sub.id]
    restarted.poll()
    assert [n.sth_index for n in restarted.whats_new(sub.id, 0)] == [1, 2, 3]


def test_unbuildable_batch_is_a_tombstone() -> None:
    world = World()
    sub = world.notifier.subscribe(QUERY)
    world.endpoint.bad_subjects = True
    world.interval("a.example.com")
    world.endpoint.bad_subjects = False
    world.interval("b.example.com")

    (evidence,) = world.notifier.evidence()
    assert evidence.kind is EvidenceKind.SNAPSHOT_MISMATCH
    assert verify_evidence(evidence, world.log.public_key)
    with pytest.raises(SnapshotMismatch):
        world.notifier.notify(sub.id, 1)
    assert world.notifier.follower.next_index == 3
    assert world.notifier.notify(sub.id, 2).sth_index == 2


def test_malformed_backfilled_sth_counts_as_missing() -> None:
    world = World()
    sub = world.notifier.subscribe(QUERY)
    world.endpoint.stripped.add(1)
    world.log.submit("a.example.com", b"cert:a.example.com")
    world.t += INTERVAL
    world.log.issue_sth(world.t)
    world.interval("b.example.com")

    (evidence,) = world.notifier.evidence()
    assert evidence.kind is EvidenceKind.INDEX_GAP
    assert verify_evidence(evidence, world.log.public_key)
    assert world.notifier.follower.next_index == 3
    assert 1 not in world.notifier.cache
    assert [leaf.name for leaf in world.notifier.notify(sub.id, 2).proof.matches] == ["b.example.com"]


def test_run_backs_off_up_to_the_maximum() -> None:
    world = World(poll_period_ms=100, max_backoff_ms=1_000)
    world.endpoint.failure = LogUnreachable("connection refused")
    stop = StopAfter(rounds=6)
    world.notifier.run(stop)
    assert stop.waits == pytest.approx([0.1, 0.2, 0.4, 0.8, 1.0, 1.0])


def test_run_survives_a_failed_round() -> None:
    world = World(poll_period_ms=100)
    world.endpoint.failure = CodecError("garbled STH")
    stop = StopAfter(rounds=3)
    world.notifier.run(stop)
    assert stop.waits == pytest.approx([0.1, 0.1, 0.1])

    world.endpoint.failure = None
    world.log.submit("a.example.com", b"a")
    world.log.issue_sth(world.t + INTERVAL)
    world.notifier.run(StopAfter(rounds=1))
    assert world.notifier.latest_index == 1


def test_batch_after_a_replay_rebuilds_cleanly() -> None:
    world = World()
    sub = world.notifier.subscribe(QUERY)
    world.interval("a.example.com")
    world.interval("b.example.com", fault=LogFault.REPLAY_INDEX)
    world.interval("c.example.com")

    assert [e.kind for e in world.notifier.evidence()] == [EvidenceKind.INCONSISTENT_STHS]
    assert [leaf.name for leaf in world.notifier.notify(sub.id, 2).proof.matches] == ["c.example.com"]
