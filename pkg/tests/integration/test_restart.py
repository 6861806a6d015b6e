from pathlib import Path

from app.config import LogSettings, NotifierSettings, SubjectSettings
from app.roles.log import CTLog
from app.roles.notifier import Notifier
from app.roles.subject import Subject
from app.roles.watcher import SubjectWatcher

INTERVAL = 1_000
T0 = 1_700_000_000_000
QUERY = "*.example.com"


class Deployment:
    """Log, notifier and one subject, all backed by files under one directory."""

    def __init__(self, root: Path) -> None:
        self.now = T0
        self.log = CTLog.open(LogSettings(data_dir=root / "log", interval_ms=INTERVAL))
        self.notifier = Notifier.open(
            self.log,
            NotifierSettings(interval_ms=INTERVAL, retention=4, state_path=root / "notifier.json"),
        )
        self.subject = Subject.open(
            self.log.public_key,
            SubjectSettings(query=QUERY, state_dir=root / "subject"),
            clock=lambda: self.now + 5_000,
        )

    def watch(self, subscription_id: str) -> SubjectWatcher:
        return SubjectWatcher(self.subject, self.notifier, subscription_id, self.log)

    def interval(self, t: int, watcher: SubjectWatcher, *names: str) -> None:
        self.now = T0 + t * INTERVAL
        for name in names:
            self.log.submit(name, name.encode())
        self.log.issue_sth(self.now)
        self.notifier.poll()
        watcher.sync()


def test_everything_resumes_after_restart(tmp_path: Path) -> None:
    first = Deployment(tmp_path)
    genesis = first.log.issue_sth(T0)
    first.notifier.poll()
    first.subject.bootstrap(genesis)
    sub = first.notifier.subscribe(QUERY, since_index=genesis.index)
    watcher = first.watch(sub.id)
    for t in range(1, 4):
        first.interval(t, watcher, f"h{t}.example.com", f"h{t}.example.org")
    first.log.submit("pending.example.com", b"pending.example.com")
    assert first.subject.expected_next_index == 4

    second = Deployment(tmp_path)
    assert second.subject.bootstrapped
    assert second.subject.expected_next_index == 4
    assert sub.id in second.notifier.subscriptions
    assert second.log.get_sth() == first.log.get_sth()
    second.notifier.poll()

    watcher = second.watch(sub.id)
    for t in range(4, 7):
        second.interval(t, watcher, f"h{t}.example.com")
    names = [name for name, _ in watcher.matches]
    assert names == ["h4.example.com", "pending.example.com", "h5.example.com", "h6.example.com"]
    assert second.subject.expected_next_index == 7
    assert second.subject.state.evidence == []
    assert second.notifier.evidence() == []


def test_restart_after_a_long_outage_uses_the_log(tmp_path: Path) -> None:
    first = Deployment(tmp_path)
    genesis = first.log.issue_sth(T0)
    first.notifier.poll()
    first.subject.bootstrap(genesis)
    sub = first.notifier.subscribe(QUERY, since_index=genesis.index)
    for t in range(1, 8):
        first.now = T0 + t * INTERVAL
        first.log.submit(f"h{t}.example.com", b"cert")
        first.log.issue_sth(first.now)
        first.notifier.poll()

    second = Deployment(tmp_path)
    second.now = first.now
    watcher = second.watch(sub.id)
    second.notifier.poll()
    watcher.sync()
    assert second.subject.expected_next_index == 8
    assert len(watcher.matches) == 7
    assert second.subject.state.evidence == []
