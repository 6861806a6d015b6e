"""The untrusted notifier.

It follows the log, rebuilds every batch tree with the published constant and
serves one wild-card proof per STH and subscription, pulled by subjects or
pushed to their callbacks. It holds no key material: everything it hands out
is checked by the subject against the log's signature.
"""

from __future__ import annotations

import logging
import secrets
import threading
from collections import OrderedDict
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from enum import Enum

import requests
from opentelemetry import trace

from app.config.settings import NotifierSettings
from app.core import wtree
from app.core.omega import WildcardQuery, parse_query
from app.core.sth import LogEntry, SignedTreeHead
from app.errors import (
    BatchEvicted,
    BatchUnavailable,
    CodecError,
    DuplicateName,
    IndexGapUnfillable,
    LogUnreachable,
    LWMError,
    MalformedName,
    SnapshotMismatch,
    UnknownSubscription,
)
from app.roles.follower import LogEndpoint, STHFollower, Update
from app.roles.log import now_ms
from app.roles.subject import ArtifactTag, Evidence, EvidenceKind, rebuild_batch
from app.utils.journal import read_json, write_json_atomic
from app.utils.telemetry import EventLogger
from app.utils.typing import (
    NotificationModel,
    NotifierStateModel,
    SignedTreeHeadModel,
    SubscriptionModel,
)

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

Handler = Callable[["Notification"], None]


class NotifierFault(str, Enum):
    """One-shot notifier misbehaviour used by the demo."""

    SKIP_NOTIFICATION = "skip-notification"
    OMIT_MATCH = "omit-match"


@dataclass(frozen=True)
class Notification:
    """What a subject receives for one STH.

    ``proof_bytes`` is kept in wire form so a malformed proof reaches the
    subject's verifier instead of failing on receipt.
    """

    sth: SignedTreeHead
    proof_bytes: bytes
    certificates: tuple[tuple[bytes, ...], ...] | None = None

    @property
    def sth_index(self) -> int:
        return self.sth.index

    @property
    def proof(self) -> wtree.WildcardProof:
        return wtree.WildcardProof.decode(self.proof_bytes)

    def to_model(self) -> NotificationModel:
        return NotificationModel(
            sth_index=self.sth.index,
            sth=SignedTreeHeadModel.from_sth(self.sth),
            proof=self.proof_bytes,
            certificates=None if self.certificates is None else [list(c) for c in self.certificates],
        )

    @classmethod
    def from_model(cls, model: NotificationModel) -> Notification:
        certificates = None
        if model.certificates is not None:
            certificates = tuple(tuple(c) for c in model.certificates)
        return cls(model.sth.to_sth(), model.proof, certificates)


@dataclass
class Subscription:
    id: str
    query: WildcardQuery
    last_acknowledged_index: int = 0
    callback_url: str | None = None
    handler: Handler | None = field(default=None, repr=False, compare=False)

    def to_model(self) -> SubscriptionModel:
        return SubscriptionModel(
            id=self.id,
            query=self.query.raw,
            apex_included=self.query.apex_included,
            last_acknowledged_index=self.last_acknowledged_index,
            callback_url=self.callback_url,
        )

    @classmethod
    def from_model(cls, model: SubscriptionModel) -> Subscription:
        return cls(
            id=model.id,
            query=parse_query(model.query, model.apex_included),
            last_acknowledged_index=model.last_acknowledged_index,
            callback_url=model.callback_url,
        )


@dataclass(frozen=True)
class CachedBatch:
    """A rebuilt batch. ``mismatch`` marks a tombstone that failed the audit.

    A tombstone keeps no tree.
    """

    sth: SignedTreeHead
    tree: wtree.WildTree | None
    certificates: dict[str, tuple[bytes, ...]]
    mismatch: str | None = None


class BatchCache:
    """The most recent ``retention`` batches keyed by STH index."""

    def __init__(self, retention: int) -> None:
        self.retention = retention
        self._batches: OrderedDict[int, CachedBatch] = OrderedDict()
        self._lock = threading.Lock()

    def put(self, index: int, batch: CachedBatch) -> None:
        with self._lock:
            if index in self._batches:
                return
            self._batches[index] = batch
            while len(self._batches) > self.retention:
                self._batches.popitem(last=False)

    def get(self, index: int) -> CachedBatch:
        with self._lock:
            batch = self._batches.get(index)
            oldest = next(iter(self._batches), None)
        if batch is None:
            if oldest is not None and index < oldest:
                raise BatchEvicted(f"batch {index} evicted, oldest cached is {oldest}")
            raise BatchUnavailable(f"batch {index} not available")
        return batch

    def indices_after(self, index: int) -> list[int]:
        with self._lock:
            return [i for i in self._batches if i > index]

    @property
    def oldest_index(self) -> int | None:
        with self._lock:
            return next(iter(self._batches), None)

    @property
    def latest_index(self) -> int | None:
        with self._lock:
            return next(reversed(self._batches), None)

    def __contains__(self, index: int) -> bool:
        with self._lock:
            return index in self._batches

    def __len__(self) -> int:
        with self._lock:
            return len(self._batches)


class Notifier:
    """Follows one log and serves notifications for its subscriptions."""

    def __init__(
        self,
        log: LogEndpoint,
        settings: NotifierSettings | None = None,
        session: requests.Session | None = None,
    ) -> None:
        self.log = log
        self.settings = settings or NotifierSettings()
        self.cache = BatchCache(self.settings.retention)
        self.follower = STHFollower(log, next_index=self.settings.start_index)
        self.subscriptions: dict[str, Subscription] = {}
        self.session = session or requests.Session()
        self._evidence: list[Evidence] = []
        self._faults: set[NotifierFault] = set()
        self._lock = threading.RLock()
        self.events = EventLogger(__name__)

    @classmethod
    def open(cls, log: LogEndpoint, settings: NotifierSettings) -> Notifier:
        """Restores subscriptions and re-polls the last ``retention`` batches."""
        raw = read_json(settings.state_path) if settings.state_path is not None else None
        if raw is None:
            return cls(log, settings)
        state = NotifierStateModel.model_validate(raw)
        start = max(state.resume_index - settings.retention, settings.start_index, 0)
        notifier = cls(log, replace(settings, start_index=start))
        for model in state.subscriptions:
            notifier.subscriptions[model.id] = Subscription.from_model(model)
        logger.info(
            f"Restored {len(notifier.subscriptions)} subscriptions, re-polling from index {start}"
        )
        return notifier

    def save_state(self) -> None:
        if self.settings.state_path is None:
            return
        with self._lock:
            state = NotifierStateModel(
                resume_index=self.follower.next_index,
                subscriptions=[s.to_model() for s in self.subscriptions.values()],
            )
        write_json_atomic(self.settings.state_path, state.model_dump(mode="json"))

    def inject(self, fault: NotifierFault) -> None:
        self._faults.add(NotifierFault(fault))

    def _take_fault(self, fault: NotifierFault) -> bool:
        if fault in self._faults:
            self._faults.discard(fault)
            return True
        return False

    def poll(self) -> list[tuple[SignedTreeHead, list[LogEntry]]]:
        """Fetches new STHs with their batches and caches the rebuilt trees.

        Returns:
            ``(sth, entries)`` for every new STH in index order.

        Raises:
            LogUnreachable: If the log cannot be reached.
        """
        try:
            updates = self.follower.poll()
        except IndexGapUnfillable as e:
            logger.error(f"Cannot resume following the log: {e}")
            raise
        polled = []
        for update in updates:
            if update.replayed:
                self._record_replay(update)
                continue
            if update.missing and update.previous is not None:
                self._record(
                    EvidenceKind.INDEX_GAP,
                    f"log refused indices {list(update.missing)}",
                    [(ArtifactTag.STH, update.sth.encode()), (ArtifactTag.PREV_STH, update.previous.encode())],
                )
            self._cache(update)
            polled.append((update.sth, update.entries))
        if updates:
            self.save_state()
        return polled

    def _cache(self, update: Update) -> None:
        if self._take_fault(NotifierFault.SKIP_NOTIFICATION):
            logger.warning(f"Dropping batch {update.index} (injected fault)")
            return
        certificates: dict[str, list[bytes]] = {}
        for entry in update.entries:
            certificates.setdefault(entry.subject, []).append(entry.blob)
        mismatch = None
        tree: wtree.WildTree | None = None
        try:
            tree = self.rebuild(update.sth, update.entries)
        except SnapshotMismatch as e:
            mismatch = str(e)
        except (MalformedName, DuplicateName, CodecError) as e:
            mismatch = f"batch {update.index} cannot be rebuilt: {e}"
        if mismatch is not None:
            artifacts = [(ArtifactTag.STH, update.sth.encode())]
            if update.previous is not None:
                artifacts.append((ArtifactTag.PREV_STH, update.previous.encode()))
            artifacts += [(ArtifactTag.ENTRY, entry.encode()) for entry in update.entries]
            self._record(EvidenceKind.SNAPSHOT_MISMATCH, mismatch, artifacts)
        batch = CachedBatch(
            update.sth,
            tree,
            {name: tuple(sorted(blobs)) for name, blobs in certificates.items()},
            mismatch,
        )
        self.cache.put(update.index, batch)

    def rebuild(self, sth: SignedTreeHead, entries: list[LogEntry]) -> wtree.WildTree:
        """Rebuilds the batch tree of ``sth`` with its published constant.

        Raises:
            SnapshotMismatch: If auditing is on and the tree differs from the
                signed snapshot.
        """
        with tracer.start_as_current_span("notifier.rebuild") as span:
            try:
                snap = sth.snapshot
            except CodecError as e:
                raise SnapshotMismatch(f"STH {sth.tree_size} has no usable lwm extension: {e}") from e
            tree = rebuild_batch(sth, entries)
            span.set_attribute("lwm.batch_size", tree.size)
            if self.settings.audit and tree.snapshot() != snap:
                raise SnapshotMismatch(
                    f"batch {sth.index} rebuilds to {tree.size} leaves and root "
                    f"{tree.root.hex()[:16]}, lwm says {snap.batch_size} and {snap.root.hex()[:16]}"
                )
            return tree

    def notify(self, subscription: Subscription | str, sth_index: int) -> Notification:
        """Builds the notification of one subscription for one STH.

        Raises:
            BatchEvicted: If the batch has aged out of the cache.
            BatchUnavailable: If the batch was never cached.
            SnapshotMismatch: If the batch failed the audit.
            UnknownSubscription: For an unknown id.
        """
        sub = self._subscription(subscription)
        batch = self.cache.get(sth_index)
        if batch.mismatch is not None or batch.tree is None:
            raise SnapshotMismatch(f"batch {sth_index} failed the audit: {batch.mismatch}")
        with tracer.start_as_current_span("notifier.notify"):
            proof = batch.tree.prove(sub.query)
            if proof.matches and self._take_fault(NotifierFault.OMIT_MATCH):
                proof = replace(proof, matches=proof.matches[:-1])
            certificates = None
            if not self.settings.proofs_only:
                certificates = tuple(batch.certificates.get(leaf.name, ()) for leaf in proof.matches)
            return Notification(batch.sth, proof.encode(), certificates)

    def whats_new(self, subscription: Subscription | str, since_index: int) -> list[Notification]:
        """Notifications for every cached STH after ``since_index``, in order.

        Stops before a batch that failed the audit so the subject falls back
        to the log for it.

        Raises:
            BatchEvicted: If ``since_index + 1`` has aged out of the cache.
        """
        sub = self._subscription(subscription)
        oldest = self.cache.oldest_index
        if oldest is not None and since_index + 1 < oldest:
            raise BatchEvicted(f"batches after {since_index} evicted, oldest cached is {oldest}")
        with self._lock:
            sub.last_acknowledged_index = max(sub.last_acknowledged_index, since_index)
        notifications = []
        for index in self.cache.indices_after(since_index):
            try:
                notifications.append(self.notify(sub, index))
            except SnapshotMismatch:
                break
        return notifications

    def subscribe(
        self,
        query: str | WildcardQuery,
        apex_included: bool = True,
        callback_url: str | None = None,
        handler: Handler | None = None,
        since_index: int | None = None,
    ) -> Subscription:
        if isinstance(query, str):
            query = parse_query(query, apex_included)
        if since_index is None:
            latest = self.cache.latest_index
            since_index = latest if latest is not None else 0
        sub = Subscription(secrets.token_urlsafe(12), query, since_index, callback_url, handler)
        with self._lock:
            self.subscriptions[sub.id] = sub
        self.save_state()
        self.events.log_struct({"subscription": sub.id, "query": query.raw}, kind="subscribed")
        return sub

    def unsubscribe(self, subscription_id: str) -> None:
        with self._lock:
            if self.subscriptions.pop(subscription_id, None) is None:
                raise UnknownSubscription(subscription_id)
        self.save_state()

    def _subscription(self, subscription: Subscription | str) -> Subscription:
        if isinstance(subscription, Subscription):
            return subscription
        with self._lock:
            sub = self.subscriptions.get(subscription)
        if sub is None:
            raise UnknownSubscription(subscription)
        return sub

    def push_pending(self) -> int:
        """Pushes unacknowledged notifications to callbacks and handlers.

        Delivery stops at the first failure for a subscription; the failed
        notification is retried on the next call.

        Returns:
            The number of notifications delivered.
        """
        delivered = 0
        with self._lock:
            subs = [s for s in self.subscriptions.values() if s.callback_url or s.handler]
        for sub in subs:
            try:
                pending = self.whats_new(sub, sub.last_acknowledged_index)
            except BatchEvicted as e:
                logger.warning(f"Subscription {sub.id} fell behind the cache: {e}")
                continue
            for notification in pending:
                if not self._deliver(sub, notification):
                    break
                sub.last_acknowledged_index = notification.sth_index
                delivered += 1
        if delivered:
            self.save_state()
        return delivered

    def _deliver(self, sub: Subscription, notification: Notification) -> bool:
        try:
            if sub.handler is not None:
                sub.handler(notification)
                return True
            assert sub.callback_url is not None
            response = self.session.post(
                sub.callback_url,
                json=notification.to_model().model_dump(mode="json"),
                timeout=self.settings.push_timeout_s,
            )
            response.raise_for_status()
            return True
        except requests.exceptions.RequestException as e:
            logger.warning(f"Push to {sub.callback_url} failed: {e}")
        except Exception as e:
            logger.warning(f"Handler of subscription {sub.id} refused index {notification.sth_index}: {e}")
        return False

    def run(self, stop: threading.Event) -> None:
        """Polls and pushes until ``stop`` is set.

        While the log is unreachable the wait doubles from the poll period up
        to ``max_backoff_ms``. Any other failure of one round is logged and
        the next round runs on schedule.
        """
        period = self.settings.effective_poll_period_ms / 1000
        ceiling = max(self.settings.max_backoff_ms / 1000, period)
        delay = backoff = period
        while not stop.is_set():
            try:
                self.poll()
                self.push_pending()
                delay = backoff = period
            except LogUnreachable as e:
                logger.warning(f"Log unreachable, retrying in {backoff:.1f}s: {e}")
                delay, backoff = backoff, min(backoff * 2, ceiling)
            except LWMError as e:
                logger.error(f"Poll round failed: {e}")
                delay = backoff = period
            stop.wait(delay)

    def evidence(self) -> list[Evidence]:
        return list(self._evidence)

    def _record_replay(self, update: Update) -> None:
        other = update.original
        if other is None:
            logger.warning(f"STH index {update.index} replayed but the original is no longer known")
            return
        self._record(
            EvidenceKind.INCONSISTENT_STHS,
            f"second STH for index {update.index}",
            [(ArtifactTag.STH, update.sth.encode()), (ArtifactTag.PREV_STH, other.encode())],
        )

    def _record(self, kind: EvidenceKind, message: str, artifacts: list[tuple[ArtifactTag, bytes]]) -> None:
        evidence = Evidence(kind, now_ms(), tuple(artifacts))
        self._evidence.append(evidence)
        self.events.log_struct({"kind": kind.value, "detail": message}, severity="WARNING", kind="evidence")

    @property
    def latest_index(self) -> int | None:
        return self.cache.latest_index
