"""Subject names, the Ω ordering and wild-card range resolution.

Leaves of a batch tree are sorted by their character-reversed subject name,
so every wild-card query selects one contiguous run of leaves. The sort key
("Ω key") is the reversed name with the label separator mapped to 0x00. For
names without a hyphen this is plain bytewise order of reversed names; the
mapping keeps the apex-inclusive query ``*.example.com`` contiguous even when
a sibling such as ``x-example.com`` exists, since its reversal continues with
``-`` where subdomains continue with ``.``.

Each query kind is a half-open interval ``[low, high)`` over Ω keys:

    exact "example.com"       [K,        K + 0x00)
    "*.example.com" (apex)    [K,        K + 0x01)
    "*.example.com" (no apex) [K + 0x00, K + 0x01)
    "*ample.com"              [K,        successor(K))
"""

from __future__ import annotations

import bisect
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import NewType

from app.errors import DuplicateName, MalformedName

MAX_INPUT_LENGTH = 255
MAX_NAME_LENGTH = 253
MAX_LABEL_LENGTH = 63

SubjectName = NewType("SubjectName", str)
ReversedName = NewType("ReversedName", bytes)

_LABEL = re.compile(r"[a-z0-9-]+")
_SEPARATOR_KEY = bytes.maketrans(b".", b"\x00")


def normalize(name: str) -> SubjectName:
    """Normalizes a subject name.

    Lowercases, strips one trailing dot and validates the label structure.

    Args:
        name: ASCII subject name, at most 255 characters.

    Returns:
        The normalized name.

    Raises:
        MalformedName: On non-ASCII input, illegal characters, empty labels or
            overlong names and labels.
    """
    if not isinstance(name, str) or not name.isascii():
        raise MalformedName(f"subject name must be ASCII: {name!r}")
    if len(name) > MAX_INPUT_LENGTH:
        raise MalformedName(f"subject name longer than {MAX_INPUT_LENGTH} characters")
    candidate = name.lower()
    if candidate.endswith("."):
        candidate = candidate[:-1]
    if not candidate:
        raise MalformedName("subject name is empty")
    if len(candidate) > MAX_NAME_LENGTH:
        raise MalformedName(f"subject name longer than {MAX_NAME_LENGTH} characters")
    for label in candidate.split("."):
        if not label:
            raise MalformedName(f"empty label in {name!r}")
        if len(label) > MAX_LABEL_LENGTH:
            raise MalformedName(f"label longer than {MAX_LABEL_LENGTH} characters in {name!r}")
        if not _LABEL.fullmatch(label):
            raise MalformedName(f"illegal character in {name!r}")
    return SubjectName(candidate)


def reverse(name: str) -> ReversedName:
    """Character-wise reversal of a normalized name."""
    return ReversedName(name[::-1].encode("ascii"))


def omega_key(name: str) -> bytes:
    """Sort key of ``name`` under Ω."""
    return name[::-1].encode("ascii").translate(_SEPARATOR_KEY)


def omega_sort(names: Iterable[str]) -> list[SubjectName]:
    """Sorts unique subject names under Ω.

    Raises:
        DuplicateName: If a name occurs more than once.
    """
    ordered = sorted(names, key=omega_key)
    for previous, current in zip(ordered, ordered[1:]):
        if previous == current:
            raise DuplicateName(f"duplicate subject name {current!r}")
    return [SubjectName(n) for n in ordered]


class QueryKind(str, Enum):
    EXACT = "exact"
    SUBDOMAIN = "subdomain"
    PREFIX = "prefix"


@dataclass(frozen=True)
class WildcardQuery:
    """A subject's wild-card query.

    Attributes:
        raw: The query as given, e.g. ``*.example.com`` or ``*sub.example.com``.
        suffix: Normalized name the query anchors on.
        kind: Exact name, ``*.X`` subdomain form or ``*X`` raw suffix form.
        apex_included: For ``*.X`` queries, whether ``X`` itself matches.
    """

    raw: str
    suffix: SubjectName
    kind: QueryKind
    apex_included: bool = True

    def key_bounds(self) -> tuple[bytes, bytes]:
        """Half-open Ω-key interval holding exactly the matching names."""
        key = omega_key(self.suffix)
        if self.kind is QueryKind.EXACT:
            return key, key + b"\x00"
        if self.kind is QueryKind.SUBDOMAIN:
            low = key if self.apex_included else key + b"\x00"
            return low, key + b"\x01"
        return key, key[:-1] + bytes([key[-1] + 1])

    def matches(self, name: str) -> bool:
        low, high = self.key_bounds()
        return low <= omega_key(name) < high

    def __str__(self) -> str:
        return self.raw


def parse_query(raw: str, apex_included: bool = True) -> WildcardQuery:
    """Parses ``*.X``, ``*X`` or an exact name into a WildcardQuery.

    Raises:
        MalformedName: If the anchored name does not normalize.
    """
    text = raw.strip()
    if text.startswith("*."):
        return WildcardQuery(text, normalize(text[2:]), QueryKind.SUBDOMAIN, apex_included)
    if text.startswith("*"):
        return WildcardQuery(text, normalize(text[1:]), QueryKind.PREFIX, apex_included)
    return WildcardQuery(text, normalize(text), QueryKind.EXACT, apex_included)


def key_range(query: WildcardQuery, keys: Sequence[bytes]) -> tuple[int, int]:
    """Matching index range over precomputed, sorted Ω keys."""
    low, high = query.key_bounds()
    lo = bisect.bisect_left(keys, low)
    hi = bisect.bisect_left(keys, high, lo)
    return lo, hi


def resolve_range(query: WildcardQuery, names: Sequence[str]) -> tuple[int, int]:
    """Finds the half-open index range of ``names`` matching ``query``.

    Args:
        query: The wild-card query.
        names: Ω-sorted subject names.

    Returns:
        ``(lo, hi)``; for no match ``lo == hi`` is the insertion point.
    """
    return key_range(query, [omega_key(n) for n in names])
