"""Follows a log's STHs in issuance order for the notifier and the monitor."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Protocol

from app.core.hashcore import Digest
from app.core.sth import LogEntry, SignedTreeHead, check_extensions
from app.errors import CodecError, IndexGapUnfillable, RangeError

logger = logging.getLogger(__name__)

SEEN_LIMIT = 4096


class LogEndpoint(Protocol):
    """Read side of a log, served in process by ``CTLog`` or over HTTP by ``LogClient``."""

    def get_sth(self) -> SignedTreeHead: ...

    def get_sth_at(self, index: int) -> SignedTreeHead: ...

    def get_entries(self, start: int, end: int) -> list[LogEntry]: ...

    def consistency_proof(self, first: int, second: int) -> list[Digest]: ...


@dataclass(frozen=True)
class Update:
    """One STH with the batch it closed.

    Attributes:
        sth: The new STH.
        previous: The STH processed before it, if any.
        entries: Entries between the previous STH's tree size and this one's.
        missing: Indices the log refused to serve just before this STH.
        replayed: ``sth`` carries an index at or below one already processed.
        original: For replays, the STH first seen with the same index.
    """

    sth: SignedTreeHead
    previous: SignedTreeHead | None
    entries: list[LogEntry]
    missing: tuple[int, ...] = ()
    replayed: bool = False
    original: SignedTreeHead | None = None

    @property
    def index(self) -> int:
        return self.sth.index


@dataclass
class STHFollower:
    """Turns the log's latest STH into a gap-free stream of updates.

    Index gaps are backfilled with ``get_sth_at``. An STH whose index does
    not advance is reported once as a replay and never becomes ``last``.
    """

    log: LogEndpoint
    next_index: int = 0
    last: SignedTreeHead | None = None
    _cursor: int | None = field(default=None, init=False)
    _seen: OrderedDict[int, SignedTreeHead] = field(default_factory=OrderedDict, init=False)
    _reported: set[bytes] = field(default_factory=set, init=False)

    def poll(self) -> list[Update]:
        """Returns every update since the last poll, in index order.

        Raises:
            LogUnreachable: Propagated from an HTTP endpoint.
            IndexGapUnfillable: If the batch start before ``next_index`` is unknown.
        """
        try:
            latest = self.log.get_sth()
        except RangeError:
            return []
        try:
            check_extensions(latest)
        except CodecError as e:
            logger.warning(f"Skipping STH with malformed extensions: {e}")
            return []

        if latest.index < self.next_index:
            return self._check_replay(latest)

        self._ensure_cursor()
        updates = []
        missing: list[int] = []
        for index in range(self.next_index, latest.index + 1):
            if index == latest.index:
                sth = latest
            else:
                try:
                    sth = self.log.get_sth_at(index)
                except RangeError:
                    missing.append(index)
                    continue
                try:
                    check_extensions(sth)
                except CodecError as e:
                    logger.warning(f"Treating index {index} as missing, its STH is malformed: {e}")
                    self._skip_batch(sth)
                    missing.append(index)
                    continue
            updates.append(self._advance(sth, tuple(missing)))
            missing = []
        return updates

    def _ensure_cursor(self) -> None:
        if self._cursor is not None:
            return
        if self.next_index == 0:
            self._cursor = 0
            return
        try:
            self.last = self.log.get_sth_at(self.next_index - 1)
        except RangeError as e:
            raise IndexGapUnfillable(f"cannot resume after index {self.next_index - 1}: {e}") from e
        self._cursor = self.last.tree_size
        self._remember(self.last)

    def _advance(self, sth: SignedTreeHead, missing: tuple[int, ...]) -> Update:
        assert self._cursor is not None
        entries = self._batch(sth)
        update = Update(sth, self.last, entries, missing)
        self._remember(sth)
        self.last = sth
        self.next_index = sth.index + 1
        return update

    def _batch(self, sth: SignedTreeHead) -> list[LogEntry]:
        assert self._cursor is not None
        if sth.tree_size < self._cursor:
            logger.warning(f"STH {sth.index} shrinks the log from {self._cursor} to {sth.tree_size}")
            return []
        entries = self.log.get_entries(self._cursor, sth.tree_size)
        self._cursor = sth.tree_size
        return entries

    def _skip_batch(self, sth: SignedTreeHead) -> None:
        assert self._cursor is not None
        self._cursor = max(self._cursor, sth.tree_size)

    def _check_replay(self, latest: SignedTreeHead) -> list[Update]:
        original = self._seen.get(latest.index)
        if original is not None and original.encode() == latest.encode():
            return []
        key = latest.encode()
        if key in self._reported or self.last is None:
            return []
        self._reported.add(key)
        if self._cursor is None:
            self._cursor = self.last.tree_size
        # The log starts its next batch at the replay's tree size.
        return [Update(latest, self.last, self._batch(latest), replayed=True, original=original)]

    def _remember(self, sth: SignedTreeHead) -> None:
        self._seen[sth.index] = sth
        while len(self._seen) > SEEN_LIMIT:
            self._seen.popitem(last=False)
