"""Log entries, signed tree heads and their canonical encodings.

Canonical STH serialization (the signed bytes), all integers big-endian:

    tree_size:u64 || timestamp:u64 || main_root:32 || ext_count:u16 ||
    (key_len:u8 || key || val_len:u16 || val)*

The signature is Ed25519 over SHA-256 of those bytes. The full encoding used
for journals, evidence and HTTP transport appends ``sig_len:u16 || sig``.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from app.core import hashcore
from app.core.hashcore import Digest
from app.core.wtree import Snapshot
from app.errors import CodecError

LWM_KEY = "lwm"
INDEX_KEY = "index"


@dataclass(frozen=True)
class LogEntry:
    """A submitted certificate. ``blob`` is opaque to the log."""

    seq: int
    subject: str
    blob: bytes

    def encode(self) -> bytes:
        """Main-tree leaf input."""
        name = self.subject.encode("ascii")
        return (
            struct.pack(">QH", self.seq, len(name))
            + name
            + struct.pack(">I", len(self.blob))
            + self.blob
        )

    @classmethod
    def decode(cls, data: bytes) -> LogEntry:
        try:
            seq, name_len = struct.unpack_from(">QH", data, 0)
            offset = 10
            name = data[offset : offset + name_len].decode("ascii")
            offset += name_len
            (blob_len,) = struct.unpack_from(">I", data, offset)
            offset += 4
        except (struct.error, UnicodeDecodeError) as e:
            raise CodecError("malformed log entry") from e
        blob = data[offset : offset + blob_len]
        if len(blob) != blob_len or offset + blob_len != len(data):
            raise CodecError("log entry length mismatch")
        return cls(seq, name, bytes(blob))


@dataclass(frozen=True)
class Extension:
    key: str
    value: bytes


@dataclass(frozen=True)
class SignedTreeHead:
    """The log's signed statement over its main tree and the batch snapshot."""

    tree_size: int
    timestamp: int
    main_root: Digest
    extensions: tuple[Extension, ...]
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        parts = [
            struct.pack(">QQ", self.tree_size, self.timestamp),
            self.main_root,
            struct.pack(">H", len(self.extensions)),
        ]
        for ext in self.extensions:
            key = ext.key.encode("ascii")
            parts.append(struct.pack(">B", len(key)) + key)
            parts.append(struct.pack(">H", len(ext.value)) + ext.value)
        return b"".join(parts)

    def encode(self) -> bytes:
        return self.signed_bytes() + struct.pack(">H", len(self.signature)) + self.signature

    @classmethod
    def decode(cls, data: bytes) -> SignedTreeHead:
        """Parses the full encoding.

        Raises:
            CodecError: On truncation or trailing bytes.
        """
        try:
            tree_size, timestamp = struct.unpack_from(">QQ", data, 0)
            offset = 16
            root = data[offset : offset + hashcore.DIGEST_SIZE]
            if len(root) != hashcore.DIGEST_SIZE:
                raise CodecError("truncated main root")
            offset += hashcore.DIGEST_SIZE
            (count,) = struct.unpack_from(">H", data, offset)
            offset += 2
            extensions = []
            for _ in range(count):
                (key_len,) = struct.unpack_from(">B", data, offset)
                offset += 1
                key = data[offset : offset + key_len].decode("ascii")
                offset += key_len
                (val_len,) = struct.unpack_from(">H", data, offset)
                offset += 2
                value = data[offset : offset + val_len]
                if len(value) != val_len:
                    raise CodecError("truncated extension value")
                offset += val_len
                extensions.append(Extension(key, bytes(value)))
            (sig_len,) = struct.unpack_from(">H", data, offset)
            offset += 2
            signature = data[offset : offset + sig_len]
        except (struct.error, UnicodeDecodeError) as e:
            raise CodecError("malformed signed tree head") from e
        if len(signature) != sig_len or offset + sig_len != len(data):
            raise CodecError("signed tree head length mismatch")
        return cls(tree_size, timestamp, Digest(bytes(root)), tuple(extensions), bytes(signature))

    def extension(self, key: str) -> bytes | None:
        for ext in self.extensions:
            if ext.key == key:
                return ext.value
        return None

    @property
    def index(self) -> int:
        """Value of the ``index`` extension.

        Raises:
            CodecError: If the extension is missing or not a u64.
        """
        value = self.extension(INDEX_KEY)
        if value is None or len(value) != 8:
            raise CodecError("missing or malformed index extension")
        return struct.unpack(">Q", value)[0]

    @property
    def snapshot(self) -> Snapshot:
        value = self.extension(LWM_KEY)
        if value is None:
            raise CodecError("missing lwm extension")
        return Snapshot.decode(value)

    def digest(self) -> Digest:
        return hashcore.digest(self.signed_bytes())


def lwm_extensions(index: int, snap: Snapshot) -> tuple[Extension, ...]:
    """The two LWM extensions, sorted by key."""
    return make_extensions(
        [Extension(INDEX_KEY, struct.pack(">Q", index)), Extension(LWM_KEY, snap.encode())]
    )


def make_extensions(extensions: Iterable[Extension]) -> tuple[Extension, ...]:
    return tuple(sorted(extensions, key=lambda e: e.key.encode("ascii")))


def check_extensions(sth: SignedTreeHead) -> None:
    """Checks that keys are unique and sorted and both LWM keys are valid.

    Raises:
        CodecError: Describing the first problem found.
    """
    keys = [ext.key.encode("ascii") for ext in sth.extensions]
    for previous, current in zip(keys, keys[1:]):
        if current <= previous:
            raise CodecError(f"extension keys not unique and sorted at {current!r}")
    _ = sth.index
    _ = sth.snapshot


def sign_tree_head(
    key: Ed25519PrivateKey,
    tree_size: int,
    timestamp: int,
    main_root: Digest,
    extensions: tuple[Extension, ...],
) -> SignedTreeHead:
    unsigned = SignedTreeHead(tree_size, timestamp, main_root, extensions)
    return SignedTreeHead(
        tree_size, timestamp, main_root, extensions, key.sign(unsigned.digest())
    )


def verify_signature(public_key: Ed25519PublicKey, sth: SignedTreeHead) -> bool:
    try:
        public_key.verify(sth.signature, sth.digest())
    except InvalidSignature:
        return False
    return True


def generate_signing_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


def save_private_key(key: Ed25519PrivateKey, path: Path) -> None:
    pem = key.private_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PrivateFormat.PKCS8,
        encryption_algorithm=serialization.NoEncryption(),
    )
    path.write_bytes(pem)


def load_private_key(path: Path) -> Ed25519PrivateKey:
    key = serialization.load_pem_private_key(path.read_bytes(), password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise CodecError(f"{path} does not hold an Ed25519 private key")
    return key


def public_key_pem(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PublicFormat.SubjectPublicKeyInfo,
    )


def public_key_raw(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )


def load_public_key(data: bytes) -> Ed25519PublicKey:
    """Loads a PEM SubjectPublicKeyInfo or a raw 32-byte Ed25519 key."""
    if len(data) == 32:
        return Ed25519PublicKey.from_public_bytes(data)
    key = serialization.load_pem_public_key(data)
    if not isinstance(key, Ed25519PublicKey):
        raise CodecError("not an Ed25519 public key")
    return key
