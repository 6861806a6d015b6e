"""In-process run of the whole topology: log, notifier, monitor and subjects.

Time is simulated: interval ``t`` is issued at ``START_MS + t * interval_ms``
and every role reads the same clock, so a run is reproducible from its seed
apart from the batch constants.
"""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

from app.bench import load_corpus, synthetic_corpus
from app.config.settings import DemoSettings, LogSettings, NotifierSettings, SubjectSettings
from app.errors import ConfigError
from app.roles.log import CTLog, LogFault
from app.roles.monitor import Monitor
from app.roles.notifier import Notifier, NotifierFault
from app.roles.subject import Evidence, EvidenceKind, Subject
from app.roles.watcher import SubjectWatcher
from app.utils.telemetry import EventLogger

logger = logging.getLogger(__name__)

START_MS = 1_700_000_000_000
SUBJECT_DELAY_MS = 5_000
BLOB_SIZE = 64


class InjectedFault(NamedTuple):
    """What the demo injects for a fault name and who must catch it."""

    component: str
    fault: str
    kind: EvidenceKind
    # "monitor", "notifier" or "subjects": the party that must produce ``kind``.
    detector: str


FAULTS: dict[str, InjectedFault] = {
    "skip-notification": InjectedFault(
        "notifier", NotifierFault.SKIP_NOTIFICATION.value, EvidenceKind.INDEX_GAP, "subjects"
    ),
    "omit-match": InjectedFault("notifier", NotifierFault.OMIT_MATCH.value, EvidenceKind.PROOF_INVALID, "subjects"),
    "forge-snapshot": InjectedFault("log", LogFault.OMIT_FROM_LWM.value, EvidenceKind.SNAPSHOT_MISMATCH, "monitor"),
    "replay-index": InjectedFault("log", LogFault.REPLAY_INDEX.value, EvidenceKind.INDEX_REPLAY, "monitor"),
    "stale-sth": InjectedFault("log", LogFault.STALE_TIMESTAMP.value, EvidenceKind.STALE_TIMESTAMP, "subjects"),
    "add-to-lwm": InjectedFault("log", LogFault.ADD_TO_LWM.value, EvidenceKind.SNAPSHOT_MISMATCH, "monitor"),
    "wrong-constant": InjectedFault("log", LogFault.WRONG_CONSTANT.value, EvidenceKind.SNAPSHOT_MISMATCH, "monitor"),
    "wrong-batch-size": InjectedFault(
        "log", LogFault.WRONG_BATCH_SIZE.value, EvidenceKind.SNAPSHOT_MISMATCH, "monitor"
    ),
    "stale-root": InjectedFault("log", LogFault.STALE_ROOT.value, EvidenceKind.SNAPSHOT_MISMATCH, "monitor"),
    "skip-index": InjectedFault("log", LogFault.SKIP_INDEX.value, EvidenceKind.INDEX_GAP, "monitor"),
    "inconsistent-main-root": InjectedFault(
        "log", LogFault.INCONSISTENT_MAIN_ROOT.value, EvidenceKind.INCONSISTENT_STHS, "monitor"
    ),
}
FAULTS["omit-from-lwm"] = FAULTS["forge-snapshot"]
FAULTS["stale-timestamp"] = FAULTS["stale-sth"]


@dataclass
class DemoReport:
    intervals: int
    fault: str | None
    fault_interval: int | None
    monitor: list[Evidence] = field(default_factory=list)
    notifier: list[Evidence] = field(default_factory=list)
    subjects: dict[str, list[Evidence]] = field(default_factory=dict)
    accepted: dict[str, int] = field(default_factory=dict)
    oracle_mismatches: list[str] = field(default_factory=list)
    # (party, kind) -> interval in which the party first recorded that kind.
    first_detected: dict[tuple[str, EvidenceKind], int] = field(default_factory=dict)

    @property
    def all_evidence(self) -> list[Evidence]:
        found = self.monitor + self.notifier
        for records in self.subjects.values():
            found += records
        return found

    def kinds(self) -> Counter[EvidenceKind]:
        return Counter(e.kind for e in self.all_evidence)

    def detection_interval(self) -> int | None:
        """Interval in which the expected party first recorded the fault's kind."""
        if self.fault is None:
            return None
        expected = FAULTS[self.fault]
        return self.first_detected.get((expected.detector, expected.kind))

    @property
    def ok(self) -> bool:
        """Honest runs leave no evidence; a fault is caught within one interval."""
        if self.fault is None:
            return not self.all_evidence and not self.oracle_mismatches
        detected = self.detection_interval()
        return detected is not None and self.fault_interval is not None and detected <= self.fault_interval + 1


class Demo:
    def __init__(self, settings: DemoSettings) -> None:
        if settings.inject is not None and settings.inject not in FAULTS:
            raise ConfigError(f"Unknown fault {settings.inject!r}; choose from {', '.join(sorted(FAULTS))}")
        if settings.intervals < 1 or settings.subjects < 1:
            raise ConfigError("demo needs at least one interval and one subject")
        self.settings = settings
        self.rng = random.Random(settings.seed)
        self.now = START_MS
        self.log = CTLog(LogSettings(interval_ms=settings.interval_ms))
        self.notifier = Notifier(
            self.log, NotifierSettings(interval_ms=settings.interval_ms, retention=settings.retention)
        )
        self.monitor = Monitor(self.log, self.log.public_key, clock=self.clock)
        if settings.corpus is not None:
            corpus = load_corpus(settings.corpus)
        else:
            corpus = synthetic_corpus(200 + 10 * settings.subjects, settings.seed)
        if len(corpus) <= settings.subjects:
            raise ConfigError(f"corpus needs more than {settings.subjects} names")
        self.domains = corpus[: settings.subjects]
        self.background = corpus[settings.subjects :]
        self.watchers: list[SubjectWatcher] = []

    def clock(self) -> int:
        return self.now

    def subject_clock(self) -> int:
        return self.now + SUBJECT_DELAY_MS

    def _submit_interval(self) -> None:
        for domain in self.domains:
            self.log.submit(self._name_under(domain), self.rng.randbytes(BLOB_SIZE))
        for _ in range(max(self.settings.certs_per_interval - len(self.domains), 0)):
            if self.rng.random() < 0.3:
                name = self._name_under(self.rng.choice(self.domains))
            else:
                name = self._name_under(self.rng.choice(self.background))
            self.log.submit(name, self.rng.randbytes(BLOB_SIZE))

    def _name_under(self, domain: str) -> str:
        roll = self.rng.random()
        if roll < 0.2:
            return domain
        if roll < 0.6:
            return f"{self.rng.choice(['www', 'mail', 'api', 'cdn', 'shop'])}.{domain}"
        if roll < 0.8:
            # Shares the suffix but not the label boundary.
            return f"x-{domain}"
        return f"h{self.rng.randrange(1000)}.{self.rng.choice(['eu', 'us'])}.{domain}"

    def _setup_subjects(self) -> None:
        genesis = self.log.issue_sth(self.now)
        self.notifier.poll()
        self.monitor.poll_and_audit()
        for domain in self.domains:
            settings = SubjectSettings(query=f"*.{domain}")
            subject = Subject(self.log.public_key, settings.query, settings, clock=self.subject_clock)
            subject.bootstrap(genesis)
            sub = self.notifier.subscribe(subject.query, since_index=genesis.index)
            self.watchers.append(SubjectWatcher(subject, self.notifier, sub.id, self.log))

    def _inject(self) -> None:
        assert self.settings.inject is not None
        injected = FAULTS[self.settings.inject]
        if injected.component == "log":
            self.log.inject(LogFault(injected.fault))
        else:
            self.notifier.inject(NotifierFault(injected.fault))

    def run(self) -> DemoReport:
        settings = self.settings
        fault_at = settings.intervals // 2 if settings.inject else None
        report = DemoReport(settings.intervals, settings.inject, fault_at)
        self._setup_subjects()
        for t in range(settings.intervals):
            self.now = START_MS + (t + 1) * settings.interval_ms
            self._submit_interval()
            if t == fault_at:
                self._inject()
            self.log.issue_sth(self.now)
            self.notifier.poll()
            self.monitor.poll_and_audit()
            for watcher in self.watchers:
                watcher.sync()
            self._note_detections(report, t)

        report.monitor = self.monitor.evidence()
        report.notifier = self.notifier.evidence()
        for watcher in self.watchers:
            key = str(watcher.subject.query)
            report.subjects[key] = list(watcher.subject.state.evidence)
            report.accepted[key] = sum(len(blobs) for _, blobs in watcher.matches)
            if settings.inject is None:
                mismatch = self._oracle_mismatch(watcher)
                if mismatch:
                    report.oracle_mismatches.append(f"{key}: {mismatch}")
        return report

    def _note_detections(self, report: DemoReport, t: int) -> None:
        parties = [("monitor", self.monitor.evidence()), ("notifier", self.notifier.evidence())]
        parties += [("subjects", w.subject.state.evidence) for w in self.watchers]
        for party, records in parties:
            for evidence in records:
                report.first_detected.setdefault((party, evidence.kind), t)

    def _oracle_mismatch(self, watcher: SubjectWatcher) -> str | None:
        """Compares accepted certificates with a plain filter over the log."""
        accepted = watcher.subject.accepted_sths()
        start, end = accepted[0].tree_size, accepted[-1].tree_size
        expected = Counter(
            (e.subject, e.blob) for e in self.log.get_entries(start, end) if watcher.subject.query.matches(e.subject)
        )
        got = Counter((name, blob) for name, blobs in watcher.matches for blob in blobs)
        if expected == got:
            return None
        return f"{sum((expected - got).values())} missing, {sum((got - expected).values())} unexpected"


def run_demo(settings: DemoSettings) -> int:
    """Runs the demo and logs a summary. Returns the exit status."""
    report = Demo(settings).run()
    kinds = {kind.value: count for kind, count in report.kinds().items()}
    EventLogger(__name__).log_struct(
        {
            "intervals": report.intervals,
            "fault": report.fault,
            "fault_interval": report.fault_interval,
            "detected_interval": report.detection_interval(),
            "evidence": kinds,
            "accepted_certificates": report.accepted,
            "oracle_mismatches": report.oracle_mismatches,
            "ok": report.ok,
        },
        severity="INFO" if report.ok else "ERROR",
        kind="demo_summary",
    )
    print(f"intervals={report.intervals} fault={report.fault or 'none'} evidence={kinds or 'none'}")
    for query, count in report.accepted.items():
        print(f"  {query}: {count} certificates accepted, {len(report.subjects[query])} evidence records")
    for mismatch in report.oracle_mismatches:
        print(f"  oracle mismatch {mismatch}")
    if not report.ok:
        logger.error("Demo finished with unexpected results")
    return 0 if report.ok else 1
