"""RFC 6962 append-only Merkle tree for the log's main history.

Complete power-of-two subtrees never change once filled, so their digests are
cached; everything else is recomputed on demand.
"""

from __future__ import annotations

from collections.abc import Sequence

from app.core import hashcore
from app.core.hashcore import Digest
from app.core.wtree import split_point
from app.errors import RangeError


class MerkleLog:
    """Leaf hashes of the main tree plus a cache of complete subtrees."""

    def __init__(self) -> None:
        self._leaves: list[Digest] = []
        self._complete: dict[tuple[int, int], Digest] = {}

    def __len__(self) -> int:
        return len(self._leaves)

    def append(self, leaf_input: bytes) -> int:
        self._leaves.append(hashcore.rfc6962_leaf_hash(leaf_input))
        return len(self._leaves) - 1

    def leaf_hash(self, index: int) -> Digest:
        return self._leaves[index]

    def root(self, size: int | None = None) -> Digest:
        """Root over the first ``size`` leaves (all leaves by default)."""
        size = len(self._leaves) if size is None else size
        self._check_size(size)
        if size == 0:
            return hashcore.rfc6962_empty_hash()
        return self._subtree(0, size)

    def inclusion_proof(self, index: int, size: int) -> list[Digest]:
        """Audit path for leaf ``index`` in the tree of ``size`` leaves.

        Raises:
            RangeError: Unless ``0 <= index < size <= len(self)``.
        """
        self._check_size(size)
        if not 0 <= index < size:
            raise RangeError(f"leaf {index} not in tree of size {size}")
        path: list[Digest] = []
        lo, hi = 0, size
        while hi - lo > 1:
            k = split_point(hi - lo)
            if index < lo + k:
                path.append(self._subtree(lo + k, hi))
                hi = lo + k
            else:
                path.append(self._subtree(lo, lo + k))
                lo = lo + k
        path.reverse()
        return path

    def consistency_proof(self, first: int, second: int) -> list[Digest]:
        """RFC 6962 consistency proof between two tree sizes.

        Raises:
            RangeError: Unless ``0 < first <= second <= len(self)``.
        """
        self._check_size(second)
        if not 0 < first <= second:
            raise RangeError(f"invalid consistency range {first}..{second}")
        return self._subproof(first, 0, second, True)

    def _subproof(self, m: int, lo: int, hi: int, complete: bool) -> list[Digest]:
        n = hi - lo
        if m == n:
            return [] if complete else [self._subtree(lo, hi)]
        k = split_point(n)
        if m <= k:
            return self._subproof(m, lo, lo + k, complete) + [self._subtree(lo + k, hi)]
        return self._subproof(m - k, lo + k, hi, False) + [self._subtree(lo, lo + k)]

    def _subtree(self, lo: int, hi: int) -> Digest:
        if hi - lo == 1:
            return self._leaves[lo]
        cached = self._complete.get((lo, hi))
        if cached is not None:
            return cached
        k = split_point(hi - lo)
        value = hashcore.rfc6962_node_hash(self._subtree(lo, lo + k), self._subtree(lo + k, hi))
        if (hi - lo) & (hi - lo - 1) == 0:
            self._complete[(lo, hi)] = value
        return value

    def _check_size(self, size: int) -> None:
        if not 0 <= size <= len(self._leaves):
            raise RangeError(f"tree size {size} outside 0..{len(self._leaves)}")


def root_of(leaf_inputs: Sequence[bytes]) -> Digest:
    """Root of a tree over ``leaf_inputs`` computed without caching."""
    log = MerkleLog()
    for data in leaf_inputs:
        log.append(data)
    return log.root()


def verify_inclusion(leaf: Digest, index: int, size: int, path: Sequence[Digest], root: Digest) -> bool:
    """Checks an RFC 6962 inclusion proof for a leaf hash."""
    if not 0 <= index < size:
        return False
    fn, sn = index, size - 1
    r = leaf
    for p in path:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            r = hashcore.rfc6962_node_hash(p, r)
            if not fn & 1:
                while not fn & 1 and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            r = hashcore.rfc6962_node_hash(r, p)
        fn >>= 1
        sn >>= 1
    return sn == 0 and r == root


def verify_consistency(
    first: int,
    second: int,
    first_root: Digest,
    second_root: Digest,
    proof: Sequence[Digest],
) -> bool:
    """Checks an RFC 6962 consistency proof between two tree heads."""
    if first == 0:
        return not proof
    if first > second:
        return False
    if first == second:
        return not proof and first_root == second_root
    nodes = list(proof)
    if first & (first - 1) == 0:
        nodes.insert(0, first_root)
    if not nodes:
        return False
    fn, sn = first - 1, second - 1
    while fn & 1:
        fn >>= 1
        sn >>= 1
    fr = sr = nodes[0]
    for c in nodes[1:]:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            fr = hashcore.rfc6962_node_hash(c, fr)
            sr = hashcore.rfc6962_node_hash(c, sr)
            if not fn & 1:
                while not fn & 1 and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            sr = hashcore.rfc6962_node_hash(sr, c)
        fn >>= 1
        sn >>= 1
    return fr == first_root and sr == second_root and sn == 0
