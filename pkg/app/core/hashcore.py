"""Domain-separated hashing primitives.

This module is the only place hash preimages are built. Batch trees use
multi-instance hashing with a per-batch constant ``c``:

    leaf  = SHA-256(0x00 || c || value)
    node  = SHA-256(0x01 || left || right)
    empty = SHA-256(0x02 || c)

The log's main tree uses plain RFC 6962 hashing without a constant.
"""

from __future__ import annotations

import hashlib
import secrets
from collections.abc import Iterable
from typing import NewType

DIGEST_SIZE = 32
CONSTANT_SIZE = 16

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"
EMPTY_PREFIX = b"\x02"

Digest = NewType("Digest", bytes)
BatchConstant = NewType("BatchConstant", bytes)


def as_digest(value: bytes) -> Digest:
    """Checks that ``value`` is a 32-byte digest."""
    if len(value) != DIGEST_SIZE:
        raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
    return Digest(bytes(value))


def as_constant(value: bytes) -> BatchConstant:
    """Checks that ``value`` is a 16-byte batch constant."""
    if len(value) != CONSTANT_SIZE:
        raise ValueError(f"batch constant must be {CONSTANT_SIZE} bytes, got {len(value)}")
    return BatchConstant(bytes(value))


def new_constant() -> BatchConstant:
    """Samples a fresh batch constant from the OS CSPRNG."""
    return BatchConstant(secrets.token_bytes(CONSTANT_SIZE))


def digest(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def leaf_hash(c: BatchConstant, value: bytes) -> Digest:
    return Digest(hashlib.sha256(LEAF_PREFIX + c + value).digest())


def node_hash(left: Digest, right: Digest) -> Digest:
    return Digest(hashlib.sha256(NODE_PREFIX + left + right).digest())


def empty_hash(c: BatchConstant) -> Digest:
    """Root of an empty batch tree."""
    return Digest(hashlib.sha256(EMPTY_PREFIX + c).digest())


def cert_list_hash(blobs: Iterable[bytes]) -> Digest:
    """Hashes the certificates grouped under one subject name.

    Blobs are sorted bytewise first so the result does not depend on
    submission order.
    """
    h = hashlib.sha256()
    for blob in sorted(blobs):
        h.update(hashlib.sha256(blob).digest())
    return Digest(h.digest())


def rfc6962_leaf_hash(data: bytes) -> Digest:
    return Digest(hashlib.sha256(LEAF_PREFIX + data).digest())


def rfc6962_node_hash(left: Digest, right: Digest) -> Digest:
    return Digest(hashlib.sha256(NODE_PREFIX + left + right).digest())


def rfc6962_empty_hash() -> Digest:
    return Digest(hashlib.sha256(b"").digest())
