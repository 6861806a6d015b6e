"""Static wild-card Merkle tree over one batch of certificates.

Leaves are Ω-ordered subject names, each carrying a hash over its
certificates. The tree shape is the RFC 6962 one: a range of ``n > 1`` leaves
splits at the largest power of two strictly below ``n``. A wild-card proof is
the matching run of leaves plus the two neighbouring leaves with their audit
paths; either neighbour is absent when the run touches a tree edge.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from app.core import hashcore
from app.core.hashcore import BatchConstant, Digest
from app.core.omega import (
    SubjectName,
    WildcardQuery,
    key_range,
    normalize,
    omega_key,
    omega_sort,
)
from app.errors import (
    BoundaryMissing,
    CodecError,
    MalformedName,
    OrderViolation,
    RootMismatch,
    SizeMismatch,
)

PROOF_VERSION = 1
SNAPSHOT_VERSION = 1
SNAPSHOT_SIZE = 1 + hashcore.CONSTANT_SIZE + 8 + hashcore.DIGEST_SIZE

_LEFT_PRESENT = 0x01
_RIGHT_PRESENT = 0x02


def split_point(n: int) -> int:
    """Largest power of two strictly less than ``n`` (for ``n > 1``)."""
    return 1 << ((n - 1).bit_length() - 1)


def path_ranges(index: int, size: int) -> list[tuple[int, int]]:
    """Leaf ranges of the siblings on the audit path of ``index``, leaf to root."""
    ranges = []
    lo, hi = 0, size
    while hi - lo > 1:
        k = split_point(hi - lo)
        if index < lo + k:
            ranges.append((lo + k, hi))
            hi = lo + k
        else:
            ranges.append((lo, lo + k))
            lo = lo + k
    ranges.reverse()
    return ranges


@dataclass(frozen=True)
class LeafValue:
    """A subject name and the hash over its certificates."""

    name: SubjectName
    cert_list_hash: Digest

    @classmethod
    def from_certificates(cls, name: str, blobs: Iterable[bytes]) -> LeafValue:
        return cls(SubjectName(name), hashcore.cert_list_hash(blobs))

    def serialize(self) -> bytes:
        raw = self.name.encode("ascii")
        return struct.pack(">H", len(raw)) + raw + self.cert_list_hash

    @classmethod
    def parse(cls, data: bytes, offset: int = 0) -> tuple[LeafValue, int]:
        """Parses one serialized leaf starting at ``offset``.

        Returns:
            The leaf and the offset just past it.
        """
        (length,) = _unpack(">H", data, offset)
        offset += 2
        raw = _take(data, offset, length)
        offset += length
        digest = _take(data, offset, hashcore.DIGEST_SIZE)
        offset += hashcore.DIGEST_SIZE
        try:
            name = raw.decode("ascii")
        except UnicodeDecodeError as e:
            raise CodecError("leaf name is not ASCII") from e
        return cls(SubjectName(name), Digest(digest)), offset


@dataclass(frozen=True)
class AuditPath:
    leaf_index: int
    siblings: tuple[Digest, ...]


@dataclass(frozen=True)
class Boundary:
    """A leaf just outside the match range, with its audit path."""

    leaf: LeafValue
    path: AuditPath


@dataclass(frozen=True)
class Snapshot:
    """Root, batch constant and size of one batch tree: the signed lwm value."""

    root: Digest
    constant: BatchConstant
    batch_size: int

    def encode(self) -> bytes:
        return (
            struct.pack(">B", SNAPSHOT_VERSION)
            + self.constant
            + struct.pack(">Q", self.batch_size)
            + self.root
        )

    @classmethod
    def decode(cls, data: bytes) -> Snapshot:
        if len(data) != SNAPSHOT_SIZE:
            raise CodecError(f"lwm value must be {SNAPSHOT_SIZE} bytes, got {len(data)}")
        if data[0] != SNAPSHOT_VERSION:
            raise CodecError(f"unsupported lwm version {data[0]}")
        constant = data[1 : 1 + hashcore.CONSTANT_SIZE]
        (size,) = struct.unpack_from(">Q", data, 1 + hashcore.CONSTANT_SIZE)
        root = data[1 + hashcore.CONSTANT_SIZE + 8 :]
        return cls(Digest(root), BatchConstant(constant), size)


@dataclass(frozen=True)
class WildcardProof:
    """Proof that ``matches`` are all the leaves matching a query.

    Attributes:
        tree_size: Number of leaves in the proven tree.
        match_lo: Index of the first match, or the insertion point.
        matches: The Ω-ordered matching leaves.
        left: Leaf ``match_lo - 1`` with its path, absent when ``match_lo == 0``.
        right: Leaf ``match_lo + len(matches)``, absent at the right edge.
    """

    tree_size: int
    match_lo: int
    matches: tuple[LeafValue, ...]
    left: Boundary | None = None
    right: Boundary | None = None

    def encode(self) -> bytes:
        parts = [struct.pack(">BQQI", PROOF_VERSION, self.tree_size, self.match_lo, len(self.matches))]
        parts.extend(leaf.serialize() for leaf in self.matches)
        flags = (_LEFT_PRESENT if self.left else 0) | (_RIGHT_PRESENT if self.right else 0)
        parts.append(struct.pack(">B", flags))
        boundaries = [b for b in (self.left, self.right) if b is not None]
        parts.extend(b.leaf.serialize() for b in boundaries)
        parts.extend(struct.pack(">H", len(b.path.siblings)) for b in boundaries)
        for b in boundaries:
            parts.extend(b.path.siblings)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> WildcardProof:
        """Parses the canonical binary encoding.

        Raises:
            CodecError: On truncation, trailing bytes, unknown version or flags.
        """
        version, tree_size, match_lo, count = _unpack(">BQQI", data, 0)
        if version != PROOF_VERSION:
            raise CodecError(f"unsupported proof version {version}")
        offset = struct.calcsize(">BQQI")
        matches = []
        for _ in range(count):
            leaf, offset = LeafValue.parse(data, offset)
            matches.append(leaf)
        (flags,) = _unpack(">B", data, offset)
        offset += 1
        if flags & ~(_LEFT_PRESENT | _RIGHT_PRESENT):
            raise CodecError(f"unknown proof flags {flags:#x}")
        sides = [flags & _LEFT_PRESENT, flags & _RIGHT_PRESENT]
        leaves: list[LeafValue | None] = []
        for present in sides:
            if present:
                leaf, offset = LeafValue.parse(data, offset)
                leaves.append(leaf)
            else:
                leaves.append(None)
        lengths: list[int] = []
        for present in sides:
            if present:
                (length,) = _unpack(">H", data, offset)
                offset += 2
                lengths.append(length)
            else:
                lengths.append(0)
        boundaries: list[Boundary | None] = []
        for side, (leaf, length) in enumerate(zip(leaves, lengths)):
            if leaf is None:
                boundaries.append(None)
                continue
            siblings = []
            for _ in range(length):
                siblings.append(Digest(_take(data, offset, hashcore.DIGEST_SIZE)))
                offset += hashcore.DIGEST_SIZE
            index = match_lo - 1 if side == 0 else match_lo + count
            boundaries.append(Boundary(leaf, AuditPath(index, tuple(siblings))))
        if offset != len(data):
            raise CodecError(f"{len(data) - offset} trailing bytes after proof")
        return cls(tree_size, match_lo, tuple(matches), boundaries[0], boundaries[1])

    def overhead_bytes(self) -> int:
        """Encoded size excluding the matched leaf values."""
        return len(self.encode()) - sum(len(leaf.serialize()) for leaf in self.matches)

    def sibling_count(self) -> int:
        return sum(len(b.path.siblings) for b in (self.left, self.right) if b is not None)


@dataclass
class WildTree:
    """An immutable batch tree with every node digest cached."""

    constant: BatchConstant
    leaves: tuple[LeafValue, ...]
    keys: tuple[bytes, ...] = field(repr=False)
    nodes: dict[tuple[int, int], Digest] = field(repr=False)
    root: Digest

    @property
    def size(self) -> int:
        return len(self.leaves)

    @property
    def names(self) -> list[SubjectName]:
        return [leaf.name for leaf in self.leaves]

    def snapshot(self) -> Snapshot:
        return Snapshot(self.root, self.constant, self.size)

    def audit_path(self, index: int) -> AuditPath:
        if not 0 <= index < self.size:
            raise IndexError(f"leaf index {index} outside tree of size {self.size}")
        siblings = tuple(self.nodes[r] for r in path_ranges(index, self.size))
        return AuditPath(index, siblings)

    def prove(self, query: WildcardQuery) -> WildcardProof:
        """Builds the wild-card proof for ``query`` in O(t + log n)."""
        if self.size == 0:
            return WildcardProof(0, 0, ())
        lo, hi = key_range(query, self.keys)
        left = Boundary(self.leaves[lo - 1], self.audit_path(lo - 1)) if lo > 0 else None
        right = Boundary(self.leaves[hi], self.audit_path(hi)) if hi < self.size else None
        return WildcardProof(self.size, lo, self.leaves[lo:hi], left, right)


def build(constant: BatchConstant, entries: Mapping[str, Iterable[bytes]]) -> WildTree:
    """Builds the batch tree for ``entries``.

    Names are normalized first; certificates of names that normalize to the
    same subject are grouped under one leaf.

    Args:
        constant: The batch constant.
        entries: Subject name to certificate blobs.

    Returns:
        The built tree; an empty mapping yields size 0 and the empty root.

    Raises:
        MalformedName: If a name does not normalize.
    """
    grouped: dict[str, list[bytes]] = {}
    for name, blobs in entries.items():
        grouped.setdefault(normalize(name), []).extend(blobs)
    ordered = omega_sort(grouped)
    leaves = tuple(LeafValue.from_certificates(name, grouped[name]) for name in ordered)
    return from_leaves(constant, leaves)


def from_leaves(constant: BatchConstant, leaves: Sequence[LeafValue]) -> WildTree:
    """Builds a tree over leaves that are already Ω-ordered and unique."""
    leaves = tuple(leaves)
    keys = tuple(omega_key(leaf.name) for leaf in leaves)
    nodes: dict[tuple[int, int], Digest] = {}
    if not leaves:
        return WildTree(constant, leaves, keys, nodes, hashcore.empty_hash(constant))

    def subtree(lo: int, hi: int) -> Digest:
        if hi - lo == 1:
            value = hashcore.leaf_hash(constant, leaves[lo].serialize())
        else:
            k = split_point(hi - lo)
            value = hashcore.node_hash(subtree(lo, lo + k), subtree(lo + k, hi))
        nodes[(lo, hi)] = value
        return value

    root = subtree(0, len(leaves))
    return WildTree(constant, leaves, keys, nodes, root)


def snapshot(tree: WildTree) -> Snapshot:
    return tree.snapshot()


def prove(tree: WildTree, query: WildcardQuery) -> WildcardProof:
    return tree.prove(query)


def verify(snap: Snapshot, query: WildcardQuery, proof: WildcardProof) -> list[LeafValue]:
    """Verifies a wild-card proof against a signed snapshot.

    On success every leaf matching ``query`` in the committed tree is in the
    returned list.

    Raises:
        SizeMismatch: The proof is for another tree size, or its range
            exceeds the tree.
        BoundaryMissing: Boundary presence or indices disagree with the range.
        OrderViolation: Leaves are not Ω-ordered around the query.
        RootMismatch: Audit paths are malformed or the root differs.
    """
    n = proof.tree_size
    if n != snap.batch_size:
        raise SizeMismatch(f"proof for {n} leaves, snapshot has {snap.batch_size}")
    matches = proof.matches
    if n == 0:
        if matches or proof.left or proof.right or proof.match_lo:
            raise BoundaryMissing("proof for an empty tree must be empty")
        if hashcore.empty_hash(snap.constant) != snap.root:
            raise RootMismatch("empty-tree root does not match the snapshot")
        return []

    lo = proof.match_lo
    hi = lo + len(matches)
    if lo < 0 or hi > n:
        raise SizeMismatch(f"match range [{lo}, {hi}) outside tree of size {n}")
    _check_boundary(proof.left, lo > 0, lo - 1, "left")
    _check_boundary(proof.right, hi < n, hi, "right")

    low, high = query.key_bounds()
    previous: bytes | None = None
    if proof.left is not None:
        previous = _leaf_key(proof.left.leaf)
        if previous >= low:
            raise OrderViolation(f"left boundary {proof.left.leaf.name!r} is not below {query}")
    for leaf in matches:
        key = _leaf_key(leaf)
        if not low <= key < high:
            raise OrderViolation(f"{leaf.name!r} does not match {query}")
        if previous is not None and key <= previous:
            raise OrderViolation(f"{leaf.name!r} is out of Ω order")
        previous = key
    if proof.right is not None and _leaf_key(proof.right.leaf) < high:
        raise OrderViolation(f"right boundary {proof.right.leaf.name!r} is not above {query}")

    span = list(matches)
    start = lo
    if proof.left is not None:
        span.insert(0, proof.left.leaf)
        start -= 1
    if proof.right is not None:
        span.append(proof.right.leaf)
    end = start + len(span)

    provided: dict[tuple[int, int], Digest] = {}
    for boundary in (proof.left, proof.right):
        if boundary is None:
            continue
        ranges = path_ranges(boundary.path.leaf_index, n)
        if len(ranges) != len(boundary.path.siblings):
            raise RootMismatch(
                f"audit path for leaf {boundary.path.leaf_index} has "
                f"{len(boundary.path.siblings)} siblings, expected {len(ranges)}"
            )
        for r, sibling in zip(ranges, boundary.path.siblings):
            if provided.setdefault(r, sibling) != sibling:
                raise RootMismatch(f"audit paths disagree on subtree {r}")

    hashes = [hashcore.leaf_hash(snap.constant, leaf.serialize()) for leaf in span]

    def reconstruct(a: int, b: int) -> Digest:
        known = provided.get((a, b))
        if b <= start or a >= end:
            if known is None:
                raise BoundaryMissing(f"no sibling covers leaves [{a}, {b})")
            return known
        if b - a == 1:
            value = hashes[a - start]
        else:
            k = split_point(b - a)
            value = hashcore.node_hash(reconstruct(a, a + k), reconstruct(a + k, b))
        if known is not None and known != value:
            raise RootMismatch(f"sibling for leaves [{a}, {b}) is inconsistent")
        return value

    if reconstruct(0, n) != snap.root:
        raise RootMismatch("reconstructed root does not match the snapshot")
    return list(matches)


def _check_boundary(boundary: Boundary | None, expected: bool, index: int, side: str) -> None:
    if boundary is None and expected:
        raise BoundaryMissing(f"{side} boundary missing but match range is not at the tree edge")
    if boundary is not None and not expected:
        raise BoundaryMissing(f"{side} boundary present but match range is at the tree edge")
    if boundary is not None and boundary.path.leaf_index != index:
        raise BoundaryMissing(f"{side} boundary at index {boundary.path.leaf_index}, expected {index}")


def _leaf_key(leaf: LeafValue) -> bytes:
    try:
        canonical = normalize(leaf.name)
    except MalformedName as e:
        raise OrderViolation(f"leaf name {leaf.name!r} is malformed") from e
    if canonical != leaf.name:
        raise OrderViolation(f"leaf name {leaf.name!r} is not normalized")
    return omega_key(canonical)


def _unpack(fmt: str, data: bytes, offset: int) -> tuple:
    try:
        return struct.unpack_from(fmt, data, offset)
    except struct.error as e:
        raise CodecError(f"truncated input at offset {offset}") from e


def _take(data: bytes, offset: int, length: int) -> bytes:
    if offset + length > len(data):
        raise CodecError(f"truncated input at offset {offset}")
    return bytes(data[offset : offset + length])
