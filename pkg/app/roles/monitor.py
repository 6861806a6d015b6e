"""Full-download auditing of every STH and its lwm snapshot."""

from __future__ import annotations

import json
import logging
import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from opentelemetry import trace

from app.config.settings import MonitorSettings
from app.core import mainlog
from app.core.hashcore import Digest
from app.core.sth import LogEntry, SignedTreeHead, check_extensions, verify_signature
from app.errors import CodecError, LogUnreachable, MalformedName, RangeError
from app.roles.follower import LogEndpoint, STHFollower, Update
from app.roles.log import now_ms
from app.roles.subject import ArtifactTag, Evidence, EvidenceKind, rebuild_batch
from app.utils.telemetry import EventLogger
from app.utils.typing import VerdictModel

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)


@dataclass(frozen=True)
class AuditVerdict:
    index: int | None
    tree_size: int
    evidence: Evidence | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.evidence is None

    @property
    def kind(self) -> EvidenceKind | None:
        return self.evidence.kind if self.evidence is not None else None

    def to_model(self) -> VerdictModel:
        return VerdictModel(
            index=self.index,
            tree_size=self.tree_size,
            status="ok" if self.ok else "failed",
            kind=self.kind.value if self.kind is not None else None,
            detail=self.detail,
        )


@dataclass(frozen=True)
class AuditInput:
    prev: SignedTreeHead | None
    cur: SignedTreeHead
    entries: Sequence[LogEntry]
    consistency: Sequence[Digest] | None


def audit_sth(
    public_key: Ed25519PublicKey,
    prev: SignedTreeHead | None,
    cur: SignedTreeHead,
    entries: Sequence[LogEntry],
    consistency: Sequence[Digest] | None,
    now: int | None = None,
) -> AuditVerdict:
    """Audits one STH against its predecessor and its batch.

    Checks, in order: signatures, extensions, index succession, timestamp
    monotonicity, the rebuilt lwm snapshot and main-tree consistency. The
    first failure decides the verdict.

    Args:
        public_key: The log's key.
        prev: The STH processed before ``cur``; ``None`` for index 0.
        cur: The STH under audit.
        entries: The batch ``[prev.tree_size, cur.tree_size)``.
        consistency: Consistency proof from ``prev`` to ``cur``; ignored when
            ``prev`` is absent or empty.
        now: Detection timestamp for the evidence.
    """
    with tracer.start_as_current_span("monitor.audit_sth") as span:
        detected_at = now_ms() if now is None else now
        pair = [(ArtifactTag.STH, cur.encode())]
        if prev is not None:
            pair.append((ArtifactTag.PREV_STH, prev.encode()))
        index = _index_or_none(cur)
        span.set_attribute("lwm.tree_size", cur.tree_size)

        def failed(kind: EvidenceKind, detail: str, artifacts: list[tuple[ArtifactTag, bytes]]) -> AuditVerdict:
            return AuditVerdict(index, cur.tree_size, Evidence(kind, detected_at, tuple(artifacts)), detail)

        if not verify_signature(public_key, cur):
            return failed(EvidenceKind.BAD_SIGNATURE, "signature invalid", pair[:1])
        try:
            check_extensions(cur)
        except CodecError as e:
            return failed(EvidenceKind.MALFORMED_EXTENSIONS, str(e), pair[:1])
        assert index is not None
        if prev is not None:
            if cur.index > prev.index + 1:
                return failed(EvidenceKind.INDEX_GAP, f"index {prev.index} followed by {cur.index}", pair)
            if cur.index <= prev.index:
                kind = EvidenceKind.INDEX_REPLAY
                if cur.index == prev.index and cur.timestamp <= prev.timestamp:
                    kind = EvidenceKind.INCONSISTENT_STHS
                return failed(kind, f"index {cur.index} after {prev.index}", pair)
            if cur.timestamp < prev.timestamp:
                return failed(EvidenceKind.STALE_TIMESTAMP, f"timestamp went back to {cur.timestamp}", pair)
        elif cur.index != 0:
            logger.info(f"Auditing from index {cur.index} without its predecessor")

        batch = [(ArtifactTag.ENTRY, e.encode()) for e in entries]
        try:
            tree = rebuild_batch(cur, entries)
        except MalformedName as e:
            return failed(EvidenceKind.SNAPSHOT_MISMATCH, f"batch holds an invalid name: {e}", pair + batch)
        span.set_attribute("lwm.batch_size", tree.size)
        if tree.snapshot() != cur.snapshot:
            return failed(
                EvidenceKind.SNAPSHOT_MISMATCH,
                f"{len(entries)} entries rebuild to {tree.size} leaves, lwm claims {cur.snapshot.batch_size}",
                pair + batch,
            )

        if prev is not None and prev.tree_size > 0:
            if cur.tree_size < prev.tree_size:
                return failed(EvidenceKind.INCONSISTENT_STHS, "tree shrank", pair)
            proof = list(consistency or [])
            if not mainlog.verify_consistency(
                prev.tree_size, cur.tree_size, prev.main_root, cur.main_root, proof
            ):
                return failed(
                    EvidenceKind.INCONSISTENT_STHS,
                    "main roots are not consistent",
                    pair + [(ArtifactTag.CONSISTENCY, b"".join(proof))],
                )
        return AuditVerdict(index, cur.tree_size)


def _index_or_none(sth: SignedTreeHead) -> int | None:
    try:
        return sth.index
    except CodecError:
        return None


def audit_many(
    public_key: Ed25519PublicKey,
    items: Sequence[AuditInput],
    workers: int = 1,
    now: int | None = None,
) -> list[AuditVerdict]:
    """Audits independent STHs in parallel; verdicts come back in input order."""

    def run(item: AuditInput) -> AuditVerdict:
        return audit_sth(public_key, item.prev, item.cur, item.entries, item.consistency, now)

    if workers <= 1:
        return [run(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, items))


class Monitor:
    """Follows a log and audits every STH it issues."""

    def __init__(
        self,
        log: LogEndpoint,
        public_key: Ed25519PublicKey,
        settings: MonitorSettings | None = None,
        clock: Callable[[], int] = now_ms,
    ) -> None:
        self.log = log
        self.public_key = public_key
        self.settings = settings or MonitorSettings()
        self.clock = clock
        self.follower = STHFollower(log, next_index=self.settings.from_index)
        self.verdicts: list[AuditVerdict] = []
        self.events = EventLogger(__name__)

    def _input(self, update: Update) -> AuditInput:
        prev, cur = update.previous, update.sth
        consistency = None
        if (
            prev is not None
            and 0 < prev.tree_size <= cur.tree_size
            and not update.replayed
        ):
            try:
                consistency = self.log.consistency_proof(prev.tree_size, cur.tree_size)
            except RangeError as e:
                logger.warning(f"Log refused consistency proof {prev.tree_size}..{cur.tree_size}: {e}")
        return AuditInput(prev, cur, update.entries, consistency)

    def poll_and_audit(self) -> list[AuditVerdict]:
        """Audits everything issued since the last call.

        Raises:
            LogUnreachable: If the log cannot be reached.
        """
        updates = self.follower.poll()
        inputs = [self._input(update) for update in updates]
        verdicts = audit_many(self.public_key, inputs, self.settings.workers, self.clock())
        for verdict in verdicts:
            self._emit(verdict)
        self.verdicts.extend(verdicts)
        return verdicts

    def _emit(self, verdict: AuditVerdict) -> None:
        model = verdict.to_model()
        severity = "INFO" if verdict.ok else "ERROR"
        self.events.log_struct(model.model_dump(exclude={"log_type", "service_name"}), severity=severity, kind="verdict")
        if self.settings.verdicts is not None:
            with open(Path(self.settings.verdicts), "a", encoding="utf-8") as f:
                f.write(json.dumps(model.model_dump(mode="json")) + "\n")

    def evidence(self) -> list[Evidence]:
        return [v.evidence for v in self.verdicts if v.evidence is not None]

    def run(self, stop: threading.Event) -> bool:
        """Audits until ``stop`` is set or, unless continuous, until caught up.

        Returns:
            False as soon as a verdict fails.
        """
        period = self.settings.poll_period_ms / 1000
        while True:
            try:
                verdicts = self.poll_and_audit()
            except LogUnreachable as e:
                logger.warning(f"Log unreachable: {e}")
                if not self.settings.continuous:
                    raise
                verdicts = []
            if any(not v.ok for v in verdicts):
                return False
            if not self.settings.continuous or stop.wait(period):
                return True
