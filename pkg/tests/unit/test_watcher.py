from pathlib import Path
from typing import Any

from app.config import LogSettings, NotifierSettings
from app.roles.log import CTLog, LogFault
from app.roles.notifier import Notifier, NotifierFault
from app.roles.subject import EvidenceKind, Subject
from app.roles.watcher import SUBSCRIPTION_FILE, SubjectWatcher, resume_subscription
from app.utils.journal import read_json

INTERVAL = 1_000
T0 = 1_700_000_000_000
QUERY = "*.example.com"


class World:
    def __init__(self, **notifier: Any) -> None:
        self.log = CTLog(LogSettings(interval_ms=INTERVAL))
        self.notifier = Notifier(self.log, NotifierSettings(interval_ms=INTERVAL, **notifier))
        self.t = T0
        genesis = self.log.issue_sth(self.t)
        self.notifier.poll()
        subject = Subject(self.log.public_key, QUERY, clock=lambda: self.t + 5_000)
        subject.bootstrap(genesis)
        sub = self.notifier.subscribe(QUERY, since_index=genesis.index)
        self.watcher = SubjectWatcher(subject, self.notifier, sub.id, self.log)

    def interval(self, name: str, fault: LogFault | None = None) -> None:
        self.log.submit(name, name.encode())
        if fault is not None:
            self.log.inject(fault)
        self.t += INTERVAL
        self.log.issue_sth(self.t)
        self.notifier.poll()

    @property
    def kinds(self) -> list[EvidenceKind]:
        return [e.kind for e in self.watcher.subject.state.evidence]


def test_follows_the_notifier() -> None:
    world = World()
    world.interval("a.example.com")
    world.interval("other.org")
    assert world.watcher.sync() == [("a.example.com", (b"a.example.com",))]
    world.interval("b.example.com")
    assert world.watcher.sync() == [("b.example.com", (b"b.example.com",))]
    assert world.watcher.subject.expected_next_index == 4
    assert len(world.watcher.matches) == 2
    assert world.kinds == []


def test_skipped_notification_recovers_from_the_log() -> None:
    world = World()
    world.interval("a.example.com")
    world.watcher.sync()
    world.notifier.inject(NotifierFault.SKIP_NOTIFICATION)
    world.interval("b.example.com")
    assert world.watcher.sync() == []
    assert world.watcher.subject.expected_next_index == 2

    world.interval("c.example.com")
    found = world.watcher.sync()
    assert [name for name, _ in found] == ["b.example.com", "c.example.com"]
    assert world.kinds == [EvidenceKind.INDEX_GAP]
    assert not world.watcher.halted


def test_tombstone_halts_on_the_log() -> None:
    world = World()
    world.interval("a.example.com")
    world.interval("b.example.com", fault=LogFault.OMIT_FROM_LWM)
    world.interval("c.example.com")
    world.watcher.sync()
    assert world.kinds == [EvidenceKind.SNAPSHOT_MISMATCH]
    assert world.watcher.halted
    assert world.watcher.subject.expected_next_index == 2
    assert world.watcher.sync() == []


def test_evicted_batches_come_from_the_log() -> None:
    world = World(retention=2)
    for name in ("a.example.com", "b.example.com", "c.example.com", "d.example.com"):
        world.interval(name)
    found = world.watcher.sync()
    assert [name for name, _ in found] == ["a.example.com", "b.example.com", "c.example.com", "d.example.com"]
    assert world.watcher.subject.expected_next_index == 5
    assert world.kinds == []


def test_index_skipped_by_the_log_halts() -> None:
    world = World()
    world.interval("a.example.com")
    world.interval("b.example.com", fault=LogFault.SKIP_INDEX)
    world.watcher.sync()
    assert world.kinds == [EvidenceKind.INDEX_GAP]
    assert world.watcher.halted
    assert world.watcher.subject.expected_next_index == 2


def test_invalid_proof_is_replaced_by_the_log_batch() -> None:
    world = World()
    world.interval("a.example.com")
    world.interval("b.example.com")
    world.notifier.inject(NotifierFault.OMIT_MATCH)
    found = world.watcher.sync()
    assert [name for name, _ in found] == ["a.example.com", "b.example.com"]
    assert world.kinds == [EvidenceKind.PROOF_INVALID]
    assert not world.watcher.halted
    assert world.watcher.subject.expected_next_index == 3


def test_subscription_is_reused_across_restarts(tmp_path: Path) -> None:
    world = World()
    subject = world.watcher.subject
    before = len(world.notifier.subscriptions)
    first = resume_subscription(world.notifier, subject, tmp_path)
    assert resume_subscription(world.notifier, subject, tmp_path) == first
    assert len(world.notifier.subscriptions) == before + 1

    world.notifier.unsubscribe(first)
    second = resume_subscription(world.notifier, subject, tmp_path)
    assert second != first
    assert second in world.notifier.subscriptions
    assert read_json(tmp_path / SUBSCRIPTION_FILE)["id"] == second


def test_subscription_for_another_query_is_replaced(tmp_path: Path) -> None:
    world = World()
    first = resume_subscription(world.notifier, world.watcher.subject, tmp_path)
    other = Subject(world.log.public_key, "*.example.org")
    other.bootstrap(world.log.get_sth_at(0))
    second = resume_subscription(world.notifier, other, tmp_path)
    assert second != first
    assert str(world.notifier.subscriptions[second].query) == "*.example.org"
