import pytest

from app.core import hashcore, mainlog
from app.core.wtree import split_point
from app.errors import RangeError

LEAVES = [f"entry-{i}".encode() for i in range(33)]


def _mth(data: list[bytes]) -> bytes:
    if not data:
        return hashcore.rfc6962_empty_hash()
    if len(data) == 1:
        return hashcore.rfc6962_leaf_hash(data[0])
    k = split_point(len(data))
    return hashcore.rfc6962_node_hash(_mth(data[:k]), _mth(data[k:]))


def _path(m: int, data: list[bytes]) -> list[bytes]:
    if len(data) <= 1:
        return []
    k = split_point(len(data))
    if m < k:
        return _path(m, data[:k]) + [_mth(data[k:])]
    return _path(m - k, data[k:]) + [_mth(data[:k])]


def _subproof(m: int, data: list[bytes], complete: bool) -> list[bytes]:
    n = len(data)
    if m == n:
        return [] if complete else [_mth(data)]
    k = split_point(n)
    if m <= k:
        return _subproof(m, data[:k], complete) + [_mth(data[k:])]
    return _subproof(m - k, data[k:], False) + [_mth(data[:k])]


@pytest.fixture(scope="module")
def log() -> mainlog.MerkleLog:
    tree = mainlog.MerkleLog()
    for data in LEAVES:
        tree.append(data)
    return tree


def test_roots_match_definition(log: mainlog.MerkleLog) -> None:
    for size in range(len(LEAVES) + 1):
        assert log.root(size) == _mth(LEAVES[:size])
    assert mainlog.root_of(LEAVES[:5]) == _mth(LEAVES[:5])


def test_inclusion_proofs(log: mainlog.MerkleLog) -> None:
    for size in range(1, len(LEAVES) + 1):
        root = log.root(size)
        for index in range(size):
            path = log.inclusion_proof(index, size)
            assert path == _path(index, LEAVES[:size])
            assert mainlog.verify_inclusion(log.leaf_hash(index), index, size, path, root)


def test_inclusion_rejects_wrong_index(log: mainlog.MerkleLog) -> None:
    path = log.inclusion_proof(3, 10)
    assert not mainlog.verify_inclusion(log.leaf_hash(3), 4, 10, path, log.root(10))
    assert not mainlog.verify_inclusion(log.leaf_hash(3), 3, 10, path[:-1], log.root(10))


def test_consistency_proofs(log: mainlog.MerkleLog) -> None:
    for second in range(1, len(LEAVES) + 1):
        for first in range(1, second + 1):
            proof = log.consistency_proof(first, second)
            assert proof == _subproof(first, LEAVES[:second], True)
            assert mainlog.verify_consistency(first, second, log.root(first), log.root(second), proof)


def test_consistency_rejects_forged_root(log: mainlog.MerkleLog) -> None:
    proof = log.consistency_proof(7, 20)
    forged = hashcore.digest(b"forged")
    assert not mainlog.verify_consistency(7, 20, forged, log.root(20), proof)
    assert not mainlog.verify_consistency(7, 20, log.root(7), forged, proof)
    assert not mainlog.verify_consistency(20, 7, log.root(20), log.root(7), proof)


def test_consistency_from_empty_tree() -> None:
    assert mainlog.verify_consistency(0, 5, hashcore.rfc6962_empty_hash(), mainlog.root_of(LEAVES[:5]), [])


@pytest.mark.parametrize("first, second", [(0, 3), (4, 3), (1, 40)])
def test_consistency_range_errors(log: mainlog.MerkleLog, first: int, second: int) -> None:
    with pytest.raises(RangeError):
        log.consistency_proof(first, second)


def test_inclusion_range_errors(log: mainlog.MerkleLog) -> None:
    with pytest.raises(RangeError):
        log.inclusion_proof(5, 5)
    with pytest.raises(RangeError):
        log.root(len(LEAVES) + 1)
