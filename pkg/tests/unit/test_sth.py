import struct
from dataclasses import replace
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from app.core import hashcore, wtree
from app.core.sth import (
    Extension,
    LogEntry,
    SignedTreeHead,
    check_extensions,
    generate_signing_key,
    load_private_key,
    load_public_key,
    lwm_extensions,
    make_extensions,
    public_key_pem,
    public_key_raw,
    save_private_key,
    sign_tree_head,
    verify_signature,
)
from app.errors import CodecError

ROOT = hashcore.digest(b"main")
SNAP = wtree.Snapshot(hashcore.digest(b"batch"), hashcore.as_constant(b"\x05" * 16), 3)


@pytest.fixture(scope="module")
def key() -> Ed25519PrivateKey:
    return generate_signing_key()


def test_signature_covers_every_field(key: Ed25519PrivateKey) -> None:
    sth = sign_tree_head(key, 10, 1_000, ROOT, lwm_extensions(4, SNAP))
    assert verify_signature(key.public_key(), sth)
    mutations = [
        replace(sth, tree_size=11),
        replace(sth, timestamp=1_001),
        replace(sth, main_root=hashcore.digest(b"other")),
        replace(sth, extensions=lwm_extensions(5, SNAP)),
        replace(sth, signature=bytes(64)),
    ]
    for mutated in mutations:
        assert not verify_signature(key.public_key(), mutated)
    assert not verify_signature(generate_signing_key().public_key(), sth)


def test_encoding_and_extension_accessors(key: Ed25519PrivateKey) -> None:
    sth = sign_tree_head(key, 10, 1_000, ROOT, lwm_extensions(4, SNAP))
    decoded = SignedTreeHead.decode(sth.encode())
    assert decoded == sth
    assert decoded.index == 4
    assert decoded.snapshot == SNAP
    assert [e.key for e in sth.extensions] == ["index", "lwm"]


def test_decode_rejects_trailing_bytes(key: Ed25519PrivateKey) -> None:
    data = sign_tree_head(key, 1, 1, ROOT, lwm_extensions(0, SNAP)).encode()
    with pytest.raises(CodecError):
        SignedTreeHead.decode(data + b"\x00")
    with pytest.raises(CodecError):
        SignedTreeHead.decode(data[:20])


def test_check_extensions_flags_bad_sets(key: Ed25519PrivateKey) -> None:
    index = Extension("index", struct.pack(">Q", 1))
    lwm = Extension("lwm", SNAP.encode())
    bad_sets = [
        (lwm, index),
        (index, index, lwm),
        (index,),
        (lwm,),
        (Extension("index", b"\x01"), lwm),
        (index, Extension("lwm", b"short")),
    ]
    for extensions in bad_sets:
        sth = sign_tree_head(key, 1, 1, ROOT, tuple(extensions))
        with pytest.raises(CodecError):
            check_extensions(sth)
    check_extensions(sign_tree_head(key, 1, 1, ROOT, make_extensions([lwm, index, Extension("x-other", b"")])))


def test_log_entry_codec() -> None:
    entry = LogEntry(7, "www.example.com", b"\x00cert")
    assert LogEntry.decode(entry.encode()) == entry
    with pytest.raises(CodecError):
        LogEntry.decode(entry.encode() + b"!")


def test_key_files(tmp_path: Path, key: Ed25519PrivateKey) -> None:
    path = tmp_path / "key.pem"
    save_private_key(key, path)
    loaded = load_private_key(path)
    assert public_key_raw(loaded.public_key()) == public_key_raw(key.public_key())
    pem = public_key_pem(key.public_key())
    assert public_key_raw(load_public_key(pem)) == public_key_raw(key.public_key())
    assert public_key_raw(load_public_key(public_key_raw(key.public_key()))) == public_key_raw(key.public_key())
