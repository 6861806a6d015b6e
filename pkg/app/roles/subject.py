"""Subject-side verification of notifications, and the evidence it keeps.

A subject trusts nothing but the log's public key. Every notification is
checked end to end; a failed check leaves the state untouched and appends one
self-contained ``Evidence`` record that a third party can re-verify with
``verify_evidence``.
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import TYPE_CHECKING, NoReturn

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from opentelemetry import trace

from app.config.settings import SubjectSettings
from app.core import hashcore, mainlog, wtree
from app.core.omega import SubjectName, WildcardQuery, parse_query
from app.core.sth import LogEntry, SignedTreeHead, check_extensions, verify_signature
from app.errors import CodecError, DuplicateName, MalformedName, MalformedRecord, NotBootstrapped, Rejection, VerifyError
from app.roles.log import now_ms
from app.utils.journal import RecordJournal, read_json, write_json_atomic
from app.utils.telemetry import EventLogger
from app.utils.typing import SubjectStateModel

if TYPE_CHECKING:
    from app.roles.notifier import Notification

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

STATE_FILE = "subject_state.json"
EVIDENCE_FILE = "evidence.journal"

Match = tuple[SubjectName, tuple[bytes, ...]]


class EvidenceKind(str, Enum):
    BAD_SIGNATURE = "BadSignature"
    MALFORMED_EXTENSIONS = "MalformedExtensions"
    INDEX_GAP = "IndexGap"
    INDEX_REPLAY = "IndexReplay"
    STALE_TIMESTAMP = "StaleTimestamp"
    PROOF_INVALID = "ProofInvalid"
    SNAPSHOT_MISMATCH = "SnapshotMismatch"
    INCONSISTENT_STHS = "InconsistentSTHs"


_KIND_CODES = {kind: code for code, kind in enumerate(EvidenceKind, start=1)}
_CODE_KINDS = {code: kind for kind, code in _KIND_CODES.items()}


class ArtifactTag(IntEnum):
    STH = 1
    PREV_STH = 2
    PROOF = 3
    CERTS = 4
    ENTRY = 5
    CONSISTENCY = 6


_HEADER = struct.Struct(">BBQQQ")


@dataclass(frozen=True)
class Evidence:
    """A binding record of misbehaviour.

    Record layout, big-endian::

        kind:u8 || apex_included:u8 || detected_at:u64 || window_ms:u64 ||
        skew_ms:u64 || query_len:u16 || query || count:u16 ||
        (tag:u8 || len:u32 || bytes)*
    """

    kind: EvidenceKind
    detected_at: int
    artifacts: tuple[tuple[ArtifactTag, bytes], ...]
    query: str = ""
    apex_included: bool = True
    window_ms: int = 0
    skew_ms: int = 0

    def encode(self) -> bytes:
        query = self.query.encode("ascii")
        parts = [
            _HEADER.pack(
                _KIND_CODES[self.kind],
                int(self.apex_included),
                self.detected_at,
                self.window_ms,
                self.skew_ms,
            ),
            struct.pack(">H", len(query)),
            query,
            struct.pack(">H", len(self.artifacts)),
        ]
        for tag, payload in self.artifacts:
            parts.append(struct.pack(">BI", tag, len(payload)) + payload)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> Evidence:
        """Parses one record.

        Raises:
            MalformedRecord: On any layout violation, including trailing bytes.
        """
        try:
            code, apex, detected_at, window, skew = _HEADER.unpack_from(data, 0)
            offset = _HEADER.size
            (query_len,) = struct.unpack_from(">H", data, offset)
            offset += 2
            query = data[offset : offset + query_len]
            if len(query) != query_len:
                raise MalformedRecord("truncated query")
            offset += query_len
            (count,) = struct.unpack_from(">H", data, offset)
            offset += 2
            artifacts = []
            for _ in range(count):
                tag, length = struct.unpack_from(">BI", data, offset)
                offset += 5
                payload = data[offset : offset + length]
                if len(payload) != length:
                    raise MalformedRecord("truncated artifact")
                offset += length
                artifacts.append((ArtifactTag(tag), bytes(payload)))
        except (struct.error, ValueError) as e:
            if isinstance(e, MalformedRecord):
                raise
            raise MalformedRecord(f"cannot parse evidence record: {e}") from e
        if offset != len(data):
            raise MalformedRecord("trailing bytes after evidence record")
        if code not in _CODE_KINDS or apex > 1:
            raise MalformedRecord(f"unknown evidence kind {code}")
        try:
            text = query.decode("ascii")
        except UnicodeDecodeError as e:
            raise MalformedRecord("query is not ASCII") from e
        return cls(_CODE_KINDS[code], detected_at, tuple(artifacts), text, bool(apex), window, skew)

    def first(self, tag: ArtifactTag) -> bytes | None:
        for t, payload in self.artifacts:
            if t is tag:
                return payload
        return None

    def every(self, tag: ArtifactTag) -> list[bytes]:
        return [payload for t, payload in self.artifacts if t is tag]


def encode_certificates(blobs: Sequence[bytes]) -> bytes:
    return struct.pack(">H", len(blobs)) + b"".join(struct.pack(">I", len(b)) + b for b in blobs)


def decode_certificates(data: bytes) -> tuple[bytes, ...]:
    (count,) = struct.unpack_from(">H", data, 0)
    offset = 2
    blobs = []
    for _ in range(count):
        (length,) = struct.unpack_from(">I", data, offset)
        offset += 4
        blob = data[offset : offset + length]
        if len(blob) != length:
            raise CodecError("truncated certificate")
        blobs.append(blob)
        offset += length
    if offset != len(data):
        raise CodecError("trailing bytes after certificates")
    return tuple(blobs)


def export_records(evidence: Iterable[Evidence]) -> bytes:
    """Concatenates records as ``len:u32 || record``."""
    return b"".join(struct.pack(">I", len(r)) + r for r in (e.encode() for e in evidence))


def load_evidence(state_dir: Path) -> list[Evidence]:
    """Evidence journalled by a subject in ``state_dir``."""
    return [Evidence.decode(record) for record in RecordJournal(Path(state_dir) / EVIDENCE_FILE)]


def import_records(data: bytes) -> list[Evidence]:
    records = []
    offset = 0
    while offset < len(data):
        if offset + 4 > len(data):
            raise MalformedRecord("truncated record length")
        (length,) = struct.unpack_from(">I", data, offset)
        offset += 4
        if offset + length > len(data):
            raise MalformedRecord("truncated record")
        records.append(Evidence.decode(data[offset : offset + length]))
        offset += length
    return records


def rebuild_batch(sth: SignedTreeHead, entries: Sequence[LogEntry]) -> wtree.WildTree:
    """Rebuilds a batch tree with the constant published in ``sth``."""
    grouped: dict[str, list[bytes]] = {}
    for entry in entries:
        grouped.setdefault(entry.subject, []).append(entry.blob)
    return wtree.build(sth.snapshot.constant, grouped)


def snapshot_matches(sth: SignedTreeHead, entries: Sequence[LogEntry]) -> bool:
    """False also when the entries cannot form a batch tree at all."""
    snap = sth.snapshot
    try:
        tree = rebuild_batch(sth, entries)
    except (MalformedName, DuplicateName):
        return False
    return tree.snapshot() == snap


def verify_evidence(record: bytes | Evidence, public_key: Ed25519PublicKey) -> bool:
    """Re-runs the failed check from the record alone.

    Returns:
        True when the artifacts prove the claimed misbehaviour.

    Raises:
        MalformedRecord: If ``record`` is bytes and does not parse.
    """
    evidence = record if isinstance(record, Evidence) else Evidence.decode(record)
    try:
        return _CHECKS[evidence.kind](evidence, public_key)
    except (CodecError, MalformedRecord, struct.error, ValueError):
        return False


def _signed(evidence: Evidence, tag: ArtifactTag, key: Ed25519PublicKey) -> SignedTreeHead | None:
    payload = evidence.first(tag)
    if payload is None:
        return None
    sth = SignedTreeHead.decode(payload)
    return sth if verify_signature(key, sth) else None


def _pair(evidence: Evidence, key: Ed25519PublicKey) -> tuple[SignedTreeHead, SignedTreeHead] | None:
    cur = _signed(evidence, ArtifactTag.STH, key)
    prev = _signed(evidence, ArtifactTag.PREV_STH, key)
    if cur is None or prev is None:
        return None
    check_extensions(cur)
    check_extensions(prev)
    return prev, cur


def _check_bad_signature(evidence: Evidence, key: Ed25519PublicKey) -> bool:
    payload = evidence.first(ArtifactTag.STH)
    if payload is None:
        return False
    return not verify_signature(key, SignedTreeHead.decode(payload))


def _check_malformed_extensions(evidence: Evidence, key: Ed25519PublicKey) -> bool:
    sth = _signed(evidence, ArtifactTag.STH, key)
    if sth is None:
        return False
    try:
        check_extensions(sth)
    except CodecError:
        return True
    return False


def _check_index_gap(evidence: Evidence, key: Ed25519PublicKey) -> bool:
    pair = _pair(evidence, key)
    return pair is not None and pair[1].index > pair[0].index + 1


def _check_index_replay(evidence: Evidence, key: Ed25519PublicKey) -> bool:
    pair = _pair(evidence, key)
    if pair is None:
        return False
    prev, cur = pair
    return cur.index <= prev.index and cur.timestamp > prev.timestamp


def _check_stale_timestamp(evidence: Evidence, key: Ed25519PublicKey) -> bool:
    sth = _signed(evidence, ArtifactTag.STH, key)
    if sth is None:
        return False
    prev = _signed(evidence, ArtifactTag.PREV_STH, key)
    if prev is not None and sth.timestamp < prev.timestamp:
        return True
    if evidence.window_ms == 0:
        return False
    return (
        sth.timestamp > evidence.detected_at + evidence.skew_ms
        or evidence.detected_at - sth.timestamp > evidence.window_ms
    )


def _check_proof_invalid(evidence: Evidence, key: Ed25519PublicKey) -> bool:
    sth = _signed(evidence, ArtifactTag.STH, key)
    payload = evidence.first(ArtifactTag.PROOF)
    if sth is None or payload is None:
        return False
    check_extensions(sth)
    query = parse_query(evidence.query, evidence.apex_included)
    try:
        proof = wtree.WildcardProof.decode(payload)
        leaves = wtree.verify(sth.snapshot, query, proof)
    except (CodecError, VerifyError):
        return True
    certificates = [decode_certificates(c) for c in evidence.every(ArtifactTag.CERTS)]
    return _certificate_problem(leaves, certificates or None) is not None


def _check_snapshot_mismatch(evidence: Evidence, key: Ed25519PublicKey) -> bool:
    sth = _signed(evidence, ArtifactTag.STH, key)
    if sth is None:
        return False
    check_extensions(sth)
    entries = [LogEntry.decode(e) for e in evidence.every(ArtifactTag.ENTRY)]
    seqs = [e.seq for e in entries]
    if seqs != list(range(sth.tree_size - len(entries), sth.tree_size)):
        return False
    prev = _signed(evidence, ArtifactTag.PREV_STH, key)
    if prev is not None and prev.tree_size != sth.tree_size - len(entries):
        return False
    return not snapshot_matches(sth, entries)


def _check_inconsistent(evidence: Evidence, key: Ed25519PublicKey) -> bool:
    first = _signed(evidence, ArtifactTag.PREV_STH, key)
    second = _signed(evidence, ArtifactTag.STH, key)
    if first is None or second is None or first.signed_bytes() == second.signed_bytes():
        return False
    if first.index == second.index:
        return True
    if second.tree_size < first.tree_size:
        return True
    payload = evidence.first(ArtifactTag.CONSISTENCY)
    if payload is None or len(payload) % hashcore.DIGEST_SIZE:
        return False
    size = hashcore.DIGEST_SIZE
    proof = [hashcore.as_digest(payload[i : i + size]) for i in range(0, len(payload), size)]
    return not mainlog.verify_consistency(
        first.tree_size, second.tree_size, first.main_root, second.main_root, proof
    )


_CHECKS: dict[EvidenceKind, Callable[[Evidence, Ed25519PublicKey], bool]] = {
    EvidenceKind.BAD_SIGNATURE: _check_bad_signature,
    EvidenceKind.MALFORMED_EXTENSIONS: _check_malformed_extensions,
    EvidenceKind.INDEX_GAP: _check_index_gap,
    EvidenceKind.INDEX_REPLAY: _check_index_replay,
    EvidenceKind.STALE_TIMESTAMP: _check_stale_timestamp,
    EvidenceKind.PROOF_INVALID: _check_proof_invalid,
    EvidenceKind.SNAPSHOT_MISMATCH: _check_snapshot_mismatch,
    EvidenceKind.INCONSISTENT_STHS: _check_inconsistent,
}


def _certificate_problem(
    leaves: Sequence[wtree.LeafValue], certificates: Sequence[Sequence[bytes]] | None
) -> str | None:
    if certificates is None:
        return "certificates missing" if leaves else None
    if len(certificates) != len(leaves):
        return f"{len(certificates)} certificate lists for {len(leaves)} matches"
    for leaf, blobs in zip(leaves, certificates):
        if hashcore.cert_list_hash(blobs) != leaf.cert_list_hash:
            return f"certificates of {leaf.name} do not match their leaf"
    return None


@dataclass
class SubjectState:
    query: WildcardQuery
    expected_next_index: int = 0
    last_timestamp: int = 0
    freshness_window_ms: int = 25 * 3_600_000
    skew_ms: int = 10 * 60_000
    accepted: dict[int, SignedTreeHead] = field(default_factory=dict)
    evidence: list[Evidence] = field(default_factory=list)

    def to_model(self) -> SubjectStateModel:
        return SubjectStateModel(
            query=self.query.raw,
            apex_included=self.query.apex_included,
            expected_next_index=self.expected_next_index,
            last_timestamp=self.last_timestamp,
            freshness_window_ms=self.freshness_window_ms,
            skew_ms=self.skew_ms,
            accepted={i: sth.encode() for i, sth in self.accepted.items()},
        )

    @classmethod
    def from_model(cls, model: SubjectStateModel) -> SubjectState:
        return cls(
            query=parse_query(model.query, model.apex_included),
            expected_next_index=model.expected_next_index,
            last_timestamp=model.last_timestamp,
            freshness_window_ms=model.freshness_window_ms,
            skew_ms=model.skew_ms,
            accepted={i: SignedTreeHead.decode(raw) for i, raw in model.accepted.items()},
        )


class Subject:
    """Verifies notifications for one query against one log."""

    def __init__(
        self,
        public_key: Ed25519PublicKey,
        query: WildcardQuery | str,
        settings: SubjectSettings | None = None,
        clock: Callable[[], int] = now_ms,
    ) -> None:
        self.settings = settings or SubjectSettings()
        if isinstance(query, str):
            query = parse_query(query, self.settings.apex_included)
        self.public_key = public_key
        self.clock = clock
        self.state = SubjectState(
            query=query,
            freshness_window_ms=self.settings.freshness_window_ms,
            skew_ms=self.settings.skew_ms,
        )
        self.bootstrapped = False
        self._journal: RecordJournal | None = None
        self._state_path: Path | None = None
        self.events = EventLogger(__name__)

    @classmethod
    def open(
        cls,
        public_key: Ed25519PublicKey,
        settings: SubjectSettings,
        clock: Callable[[], int] = now_ms,
    ) -> Subject:
        """Loads state and evidence from ``settings.state_dir`` if present."""
        state_dir = Path(settings.state_dir)
        raw = read_json(state_dir / STATE_FILE)
        if raw is None:
            subject = cls(public_key, settings.query, settings, clock)
        else:
            state = SubjectState.from_model(SubjectStateModel.model_validate(raw))
            subject = cls(public_key, state.query, settings, clock)
            subject.state = state
            subject.bootstrapped = bool(state.accepted)
        subject._state_path = state_dir / STATE_FILE
        subject._journal = RecordJournal(state_dir / EVIDENCE_FILE)
        subject.state.evidence = [Evidence.decode(r) for r in subject._journal]
        return subject

    @property
    def query(self) -> WildcardQuery:
        return self.state.query

    @property
    def expected_next_index(self) -> int:
        return self.state.expected_next_index

    def bootstrap(self, trusted_sth: SignedTreeHead) -> None:
        """First contact with an STH obtained out of band.

        Raises:
            ValueError: If the STH does not verify under the log key.
        """
        if not verify_signature(self.public_key, trusted_sth):
            raise ValueError("trusted STH does not verify under the log key")
        check_extensions(trusted_sth)
        self.state.expected_next_index = trusted_sth.index + 1
        self.state.last_timestamp = trusted_sth.timestamp
        self.state.accepted[trusted_sth.index] = trusted_sth
        self.bootstrapped = True
        self._save()
        logger.info(f"Bootstrapped {self.query} at index {trusted_sth.index}")

    def verify_notification(self, notification: Notification) -> list[Match]:
        """Checks a notification end to end and advances on success.

        Returns:
            The verified matches with their certificates; empty for a batch
            without matches, and for a duplicate of an accepted index.

        Raises:
            Rejection: With the evidence appended for the failed check.
            NotBootstrapped: Before ``bootstrap``; nothing is recorded.
        """
        with tracer.start_as_current_span("subject.verify_notification") as span:
            sth = notification.sth
            span.set_attribute("lwm.query", str(self.query))
            if self._check_header(sth):
                return []
            try:
                leaves = wtree.verify(sth.snapshot, self.query, notification.proof)
            except (CodecError, VerifyError) as e:
                self._reject(EvidenceKind.PROOF_INVALID, f"proof rejected: {e}", sth, notification)
            if notification.certificates is None and not self.settings.require_certificates:
                matches = [(leaf.name, ()) for leaf in leaves]
            else:
                problem = _certificate_problem(leaves, notification.certificates)
                if problem is not None:
                    self._reject(EvidenceKind.PROOF_INVALID, problem, sth, notification)
                certificates = notification.certificates or ()
                matches = [(leaf.name, tuple(blobs)) for leaf, blobs in zip(leaves, certificates)]
            self._accept(sth)
            return matches

    def verify_batch(self, sth: SignedTreeHead, entries: Sequence[LogEntry]) -> list[Match]:
        """Fallback when the notifier cannot serve an index: full batch download.

        Raises:
            Rejection: As for notifications; a rebuilt tree that differs from
                the signed snapshot gives SnapshotMismatch evidence.
        """
        if self._check_header(sth):
            return []
        try:
            tree: wtree.WildTree | None = rebuild_batch(sth, entries)
        except (MalformedName, DuplicateName):
            tree = None
        if tree is None or tree.snapshot() != sth.snapshot:
            artifacts = [(ArtifactTag.STH, sth.encode())]
            prev = self.state.accepted.get(sth.index - 1)
            if prev is not None:
                artifacts.append((ArtifactTag.PREV_STH, prev.encode()))
            artifacts += [(ArtifactTag.ENTRY, e.encode()) for e in entries]
            self._record_and_raise(EvidenceKind.SNAPSHOT_MISMATCH, "batch does not match lwm snapshot", artifacts)
        grouped: dict[str, list[bytes]] = {}
        for entry in entries:
            if self.query.matches(entry.subject):
                grouped.setdefault(entry.subject, []).append(entry.blob)
        self._accept(sth)
        return [(leaf.name, tuple(sorted(grouped[leaf.name]))) for leaf in tree.leaves if leaf.name in grouped]

    def _check_header(self, sth: SignedTreeHead) -> bool:
        """Signature, extension, index and freshness checks.

        Returns:
            True for an idempotent duplicate that must be ignored.
        """
        if not self.bootstrapped:
            raise NotBootstrapped(f"subject {self.query} has no trusted STH yet")
        artifacts = [(ArtifactTag.STH, sth.encode())]
        if not verify_signature(self.public_key, sth):
            self._record_and_raise(EvidenceKind.BAD_SIGNATURE, "STH signature invalid", artifacts)
        try:
            check_extensions(sth)
        except CodecError as e:
            self._record_and_raise(EvidenceKind.MALFORMED_EXTENSIONS, str(e), artifacts)

        expected = self.state.expected_next_index
        last = self.state.accepted.get(expected - 1)
        if last is not None:
            artifacts.append((ArtifactTag.PREV_STH, last.encode()))
        if sth.index > expected:
            self._record_and_raise(EvidenceKind.INDEX_GAP, f"index {sth.index}, expected {expected}", artifacts)
        if sth.index < expected:
            known = self.state.accepted.get(sth.index)
            if known is not None:
                if known.signed_bytes() == sth.signed_bytes():
                    return True
                self._record_and_raise(
                    EvidenceKind.INCONSISTENT_STHS,
                    f"two STHs for index {sth.index}",
                    [(ArtifactTag.STH, sth.encode()), (ArtifactTag.PREV_STH, known.encode())],
                )
            if last is not None and sth.timestamp > last.timestamp:
                self._record_and_raise(
                    EvidenceKind.INDEX_REPLAY, f"index {sth.index} replayed after {last.index}", artifacts
                )
            return True

        now = self.clock()
        if (
            sth.timestamp < self.state.last_timestamp
            or sth.timestamp > now + self.state.skew_ms
            or now - sth.timestamp > self.state.freshness_window_ms
        ):
            self._record_and_raise(
                EvidenceKind.STALE_TIMESTAMP,
                f"timestamp {sth.timestamp} outside freshness window at {now}",
                artifacts,
                detected_at=now,
            )
        return False

    def _accept(self, sth: SignedTreeHead) -> None:
        self.state.accepted[sth.index] = sth
        self.state.expected_next_index = sth.index + 1
        self.state.last_timestamp = sth.timestamp
        self._save()

    def _reject(self, kind: EvidenceKind, message: str, sth: SignedTreeHead, notification: Notification) -> NoReturn:
        artifacts = [(ArtifactTag.STH, sth.encode()), (ArtifactTag.PROOF, notification.proof_bytes)]
        for blobs in notification.certificates or ():
            artifacts.append((ArtifactTag.CERTS, encode_certificates(blobs)))
        self._record_and_raise(kind, message, artifacts)

    def _record_and_raise(
        self,
        kind: EvidenceKind,
        message: str,
        artifacts: list[tuple[ArtifactTag, bytes]],
        detected_at: int | None = None,
    ) -> NoReturn:
        evidence = Evidence(
            kind=kind,
            detected_at=self.clock() if detected_at is None else detected_at,
            artifacts=tuple(artifacts),
            query=self.query.raw,
            apex_included=self.query.apex_included,
            window_ms=self.state.freshness_window_ms,
            skew_ms=self.state.skew_ms,
        )
        self.state.evidence.append(evidence)
        if self._journal is not None:
            self._journal.append(evidence.encode())
        self.events.log_struct(
            {"kind": kind.value, "query": self.query.raw, "detail": message},
            severity="WARNING",
            kind="evidence",
        )
        raise Rejection(message, evidence)

    def _save(self) -> None:
        if self._state_path is not None:
            write_json_atomic(self._state_path, self.state.to_model().model_dump(mode="json"))

    def export_evidence(self) -> bytes:
        return export_records(self.state.evidence)

    def accepted_sths(self) -> list[SignedTreeHead]:
        """Accepted STHs in index order, for an external gossip layer."""
        return [self.state.accepted[i] for i in sorted(self.state.accepted)]

