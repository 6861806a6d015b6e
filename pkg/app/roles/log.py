"""A minimal CT/bis-style log that signs a batch snapshot into every STH."""

from __future__ import annotations

import logging
import struct
import threading
import time
from enum import Enum
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from opentelemetry import trace

from app.config.settings import LogSettings
from app.core import hashcore, wtree
from app.core.hashcore import Digest
from app.core.mainlog import MerkleLog
from app.core.omega import normalize
from app.core.sth import (
    INDEX_KEY,
    Extension,
    LogEntry,
    SignedTreeHead,
    generate_signing_key,
    load_private_key,
    lwm_extensions,
    make_extensions,
    save_private_key,
    sign_tree_head,
)
from app.errors import RangeError, RateLimited
from app.utils.journal import RecordJournal
from app.utils.telemetry import EventLogger

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

KEY_FILE = "signing_key.pem"
ENTRIES_FILE = "entries.journal"
STH_FILE = "sth.journal"

PHANTOM_SUBJECT = "phantom.lwm.invalid"
STALE_TIMESTAMP_LAG_MS = 26 * 3_600_000


class LogFault(str, Enum):
    """One-shot misbehaviour applied to the next STH."""

    OMIT_FROM_LWM = "omit-from-lwm"
    ADD_TO_LWM = "add-to-lwm"
    WRONG_CONSTANT = "wrong-constant"
    WRONG_BATCH_SIZE = "wrong-batch-size"
    STALE_ROOT = "stale-root"
    REPLAY_INDEX = "replay-index"
    SKIP_INDEX = "skip-index"
    INCONSISTENT_MAIN_ROOT = "inconsistent-main-root"
    STALE_TIMESTAMP = "stale-timestamp"


_NEEDS_BATCH = {LogFault.OMIT_FROM_LWM}
_NEEDS_HISTORY = {LogFault.STALE_ROOT, LogFault.REPLAY_INDEX}


def now_ms() -> int:
    return int(time.time() * 1000)


class CTLog:
    """Append-only log issuing STHs with ``index`` and ``lwm`` extensions.

    Writers (``submit``, ``issue_sth``) serialize on one lock; readers get
    copies taken under the same lock.
    """

    def __init__(
        self,
        settings: LogSettings | None = None,
        signing_key: Ed25519PrivateKey | None = None,
    ) -> None:
        self.settings = settings or LogSettings()
        self._key = signing_key or generate_signing_key()
        self._lock = threading.Lock()
        self._entries: list[LogEntry] = []
        self._tree = MerkleLog()
        self._history: list[SignedTreeHead] = []
        self._by_index: dict[int, SignedTreeHead] = {}
        self._next_index = 0
        self._faults: list[LogFault] = []
        self._entries_journal: RecordJournal | None = None
        self._sth_journal: RecordJournal | None = None
        self.events = EventLogger(__name__)

    @classmethod
    def open(cls, settings: LogSettings) -> CTLog:
        """Opens a persistent log, replaying its journals.

        Creates the data directory and signing key on first use.
        """
        if settings.data_dir is None:
            return cls(settings)
        data_dir = Path(settings.data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        key_path = data_dir / KEY_FILE
        if key_path.exists():
            key = load_private_key(key_path)
        else:
            key = generate_signing_key()
            save_private_key(key, key_path)
            logger.info(f"Generated signing key {key_path}")
        log = cls(settings, key)
        log._entries_journal = RecordJournal(data_dir / ENTRIES_FILE)
        log._sth_journal = RecordJournal(data_dir / STH_FILE)
        for record in log._entries_journal:
            entry = LogEntry.decode(record)
            log._entries.append(entry)
            log._tree.append(record)
        for record in log._sth_journal:
            log._record_sth(SignedTreeHead.decode(record))
        if log._history:
            log._next_index = max(log._by_index) + 1
        logger.info(
            f"Opened log at {data_dir}: {len(log._entries)} entries, {len(log._history)} STHs"
        )
        return log

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self._key.public_key()

    @property
    def history(self) -> list[SignedTreeHead]:
        with self._lock:
            return list(self._history)

    def inject(self, fault: LogFault) -> None:
        """Arms a fault for the next STH it applies to."""
        with self._lock:
            self._faults.append(LogFault(fault))

    def submit(self, subject: str, blob: bytes) -> int:
        """Appends a certificate; it joins the next batch.

        Raises:
            MalformedName: If ``subject`` does not normalize.
        """
        name = normalize(subject)
        with self._lock:
            entry = LogEntry(len(self._entries), name, bytes(blob))
            record = entry.encode()
            if self._entries_journal is not None:
                self._entries_journal.append(record)
            self._entries.append(entry)
            self._tree.append(record)
            return entry.seq

    def issue_sth(self, now: int | None = None) -> SignedTreeHead:
        """Closes the current batch and signs a new tree head.

        Args:
            now: Timestamp in milliseconds since the epoch.

        Raises:
            RateLimited: If the STH frequency does not allow a new STH yet.
        """
        now = now_ms() if now is None else now
        with self._lock, tracer.start_as_current_span("log.issue_sth") as span:
            previous = self._history[-1] if self._history else None
            if previous is not None and now < previous.timestamp + self.settings.interval_ms:
                raise RateLimited(
                    f"next STH allowed at {previous.timestamp + self.settings.interval_ms}, now {now}"
                )
            start = previous.tree_size if previous is not None else 0
            batch = self._entries[start:]
            faults = self._take_faults(bool(batch), previous is not None)

            grouped: dict[str, list[bytes]] = {}
            for entry in batch:
                grouped.setdefault(entry.subject, []).append(entry.blob)
            if LogFault.OMIT_FROM_LWM in faults:
                victim = batch[-1]
                grouped[victim.subject].remove(victim.blob)
                if not grouped[victim.subject]:
                    del grouped[victim.subject]
            if LogFault.ADD_TO_LWM in faults:
                grouped.setdefault(PHANTOM_SUBJECT, []).append(hashcore.new_constant())

            constant = hashcore.new_constant()
            tree = wtree.build(constant, grouped)
            snap = tree.snapshot()
            if LogFault.WRONG_CONSTANT in faults:
                snap = wtree.Snapshot(snap.root, hashcore.new_constant(), snap.batch_size)
            if LogFault.WRONG_BATCH_SIZE in faults:
                snap = wtree.Snapshot(snap.root, snap.constant, snap.batch_size + 1)

            index = self._next_index
            if LogFault.REPLAY_INDEX in faults:
                index = self._next_index - 1
            elif LogFault.SKIP_INDEX in faults:
                index = self._next_index + 1
            extensions = lwm_extensions(index, snap)
            if LogFault.STALE_ROOT in faults and previous is not None:
                lwm_value = previous.extension("lwm") or b""
                extensions = make_extensions(
                    [Extension(INDEX_KEY, struct.pack(">Q", index)), Extension("lwm", lwm_value)]
                )

            size = len(self._entries)
            main_root = self._tree.root(size)
            if LogFault.INCONSISTENT_MAIN_ROOT in faults:
                main_root = hashcore.digest(b"forged" + main_root)
            timestamp = now - STALE_TIMESTAMP_LAG_MS if LogFault.STALE_TIMESTAMP in faults else now

            sth = sign_tree_head(self._key, size, timestamp, main_root, extensions)
            if self._sth_journal is not None:
                self._sth_journal.append(sth.encode())
            self._record_sth(sth)
            self._next_index = max(self._next_index, index + 1)

            span.set_attribute("lwm.index", index)
            span.set_attribute("lwm.batch_size", tree.size)
            self.events.log_struct(
                {
                    "index": index,
                    "tree_size": size,
                    "batch_entries": len(batch),
                    "batch_leaves": tree.size,
                    "timestamp": timestamp,
                    "faults": [f.value for f in faults],
                },
                kind="sth_issued",
            )
            return sth

    def _take_faults(self, has_batch: bool, has_history: bool) -> set[LogFault]:
        applied = set()
        pending = []
        for fault in self._faults:
            if (fault in _NEEDS_BATCH and not has_batch) or (fault in _NEEDS_HISTORY and not has_history):
                pending.append(fault)
            else:
                applied.add(fault)
        self._faults = pending
        return applied

    def _record_sth(self, sth: SignedTreeHead) -> None:
        self._history.append(sth)
        self._by_index.setdefault(sth.index, sth)

    def get_sth(self) -> SignedTreeHead:
        """Latest STH.

        Raises:
            RangeError: If no STH has been issued.
        """
        with self._lock:
            if not self._history:
                raise RangeError("no STH issued yet")
            return self._history[-1]

    def get_sth_at(self, index: int) -> SignedTreeHead:
        """First STH issued with ``index``.

        Raises:
            RangeError: If no such STH exists.
        """
        with self._lock:
            sth = self._by_index.get(index)
        if sth is None:
            raise RangeError(f"no STH with index {index}")
        return sth

    def get_entries(self, start: int, end: int) -> list[LogEntry]:
        """Entries ``[start, end)``.

        Raises:
            RangeError: Unless ``0 <= start <= end <= len(log)``.
        """
        with self._lock:
            if not 0 <= start <= end <= len(self._entries):
                raise RangeError(f"entries [{start}, {end}) outside log of {len(self._entries)}")
            return self._entries[start:end]

    def consistency_proof(self, first: int, second: int) -> list[Digest]:
        with self._lock:
            return self._tree.consistency_proof(first, second)

    def inclusion_proof(self, seq: int, size: int) -> wtree.AuditPath:
        with self._lock:
            return wtree.AuditPath(seq, tuple(self._tree.inclusion_proof(seq, size)))

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)
