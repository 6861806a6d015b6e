import json
import threading
from dataclasses import replace
from pathlib import Path

import pytest

from app.config import LogSettings, MonitorSettings
from app.roles.log import CTLog, LogFault
from app.roles.monitor import AuditInput, Monitor, audit_many, audit_sth
from app.roles.subject import EvidenceKind, verify_evidence

INTERVAL = 1_000
T0 = 1_700_000_000_000


def _run(log: CTLog, monitor: Monitor, intervals: int, fault: LogFault | None = None, at: int = 2) -> None:
    for t in range(intervals):
        log.submit(f"h{t}.example.com", b"cert")
        log.submit(f"h{t}.example.org", b"cert")
        if fault is not None and t == at:
            log.inject(fault)
        log.issue_sth(T0 + t * INTERVAL)
        monitor.poll_and_audit()


def test_honest_log_passes() -> None:
    log = CTLog(LogSettings(interval_ms=INTERVAL))
    monitor = Monitor(log, log.public_key, clock=lambda: T0)
    _run(log, monitor, 5)
    assert [v.index for v in monitor.verdicts] == [0, 1, 2, 3, 4]
    assert all(v.ok for v in monitor.verdicts)
    assert monitor.evidence() == []


@pytest.mark.parametrize(
    "fault, kind",
    [
        (LogFault.OMIT_FROM_LWM, EvidenceKind.SNAPSHOT_MISMATCH),
        (LogFault.ADD_TO_LWM, EvidenceKind.SNAPSHOT_MISMATCH),
        (LogFault.WRONG_CONSTANT, EvidenceKind.SNAPSHOT_MISMATCH),
        (LogFault.WRONG_BATCH_SIZE, EvidenceKind.SNAPSHOT_MISMATCH),
        (LogFault.STALE_ROOT, EvidenceKind.SNAPSHOT_MISMATCH),
        (LogFault.SKIP_INDEX, EvidenceKind.INDEX_GAP),
        (LogFault.REPLAY_INDEX, EvidenceKind.INDEX_REPLAY),
        (LogFault.STALE_TIMESTAMP, EvidenceKind.STALE_TIMESTAMP),
        (LogFault.INCONSISTENT_MAIN_ROOT, EvidenceKind.INCONSISTENT_STHS),
    ],
)
def test_log_faults_are_flagged(fault: LogFault, kind: EvidenceKind) -> None:
    log = CTLog(LogSettings(interval_ms=INTERVAL))
    monitor = Monitor(log, log.public_key, clock=lambda: T0)
    _run(log, monitor, 4, fault)
    failed = [v for v in monitor.verdicts if not v.ok]
    assert failed
    assert failed[0].kind is kind
    assert all(v.ok for v in monitor.verdicts[:2])
    assert failed[0].evidence is not None
    assert verify_evidence(failed[0].evidence, log.public_key)


def test_audit_many_keeps_input_order() -> None:
    log = CTLog(LogSettings(interval_ms=INTERVAL))
    sths = []
    for t in range(6):
        log.submit(f"h{t}.example.com", b"cert")
        if t == 3:
            log.inject(LogFault.WRONG_BATCH_SIZE)
        sths.append(log.issue_sth(T0 + t * INTERVAL))
    items = []
    for prev, cur in zip([None, *sths], sths):
        start = prev.tree_size if prev is not None else 0
        proof = log.consistency_proof(prev.tree_size, cur.tree_size) if prev is not None else None
        items.append(AuditInput(prev, cur, log.get_entries(start, cur.tree_size), proof))

    serial = audit_many(log.public_key, items, workers=1, now=T0)
    parallel = audit_many(log.public_key, items, workers=4, now=T0)
    assert [v.index for v in parallel] == list(range(6))
    assert [v.kind for v in parallel] == [v.kind for v in serial]
    assert [v.ok for v in parallel] == [True, True, True, False, True, True]


def test_audit_rejects_foreign_signature() -> None:
    log = CTLog(LogSettings(interval_ms=INTERVAL))
    other = CTLog(LogSettings(interval_ms=INTERVAL))
    verdict = audit_sth(log.public_key, None, other.issue_sth(T0), [], None, now=T0)
    assert verdict.kind is EvidenceKind.BAD_SIGNATURE


def test_audit_rejects_wrong_batch() -> None:
    log = CTLog(LogSettings(interval_ms=INTERVAL))
    log.submit("a.example.com", b"a")
    log.submit("b.example.com", b"b")
    sth = log.issue_sth(T0)
    entries = log.get_entries(0, 2)
    assert audit_sth(log.public_key, None, sth, entries, None, now=T0).ok
    verdict = audit_sth(log.public_key, None, sth, entries[:1], None, now=T0)
    assert verdict.kind is EvidenceKind.SNAPSHOT_MISMATCH
    forged = [replace(entries[0], blob=b"other"), entries[1]]
    assert audit_sth(log.public_key, None, sth, forged, None, now=T0).kind is EvidenceKind.SNAPSHOT_MISMATCH


def test_verdicts_are_written_as_json_lines(tmp_path: Path) -> None:
    log = CTLog(LogSettings(interval_ms=INTERVAL))
    path = tmp_path / "verdicts.jsonl"
    monitor = Monitor(log, log.public_key, MonitorSettings(verdicts=path), clock=lambda: T0)
    _run(log, monitor, 4, LogFault.SKIP_INDEX)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [line["status"] for line in lines] == ["ok", "ok", "failed", "ok"]
    assert lines[2]["kind"] == "IndexGap"
    assert lines[2]["index"] == 3
    assert lines[0]["log_type"] == "verdict"


def test_run_stops_at_first_failure() -> None:
    log = CTLog(LogSettings(interval_ms=INTERVAL))
    monitor = Monitor(log, log.public_key, clock=lambda: T0)
    for t in range(3):
        log.submit(f"h{t}.example.com", b"cert")
        log.issue_sth(T0 + t * INTERVAL)
    assert monitor.run(threading.Event())
    log.inject(LogFault.INCONSISTENT_MAIN_ROOT)
    log.submit("late.example.com", b"cert")
    log.issue_sth(T0 + 3 * INTERVAL)
    assert not monitor.run(threading.Event())


def test_resume_from_index() -> None:
    log = CTLog(LogSettings(interval_ms=INTERVAL))
    for t in range(4):
        log.submit(f"h{t}.example.com", b"cert")
        log.issue_sth(T0 + t * INTERVAL)
    monitor = Monitor(log, log.public_key, MonitorSettings(from_index=2), clock=lambda: T0)
    verdicts = monitor.poll_and_audit()
    assert [v.index for v in verdicts] == [2, 3]
    assert all(v.ok for v in verdicts)
