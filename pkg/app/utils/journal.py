import json
import logging
import os
import struct
from collections.abc import Iterator
from pathlib import Path
from typing import Any

_LENGTH = struct.Struct(">I")


class RecordJournal:
    """Append-only file of length-prefixed records.

    Each record is stored as ``u32 length || payload`` and flushed to disk
    before ``append`` returns. A torn record at the tail, left by a crash in
    the middle of an append, is cut off when the journal is opened.
    """

    def __init__(self, path: Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        self._records = self._load()

    def _load(self) -> list[bytes]:
        data = self.path.read_bytes()
        records = []
        offset = 0
        while offset + _LENGTH.size <= len(data):
            (length,) = _LENGTH.unpack_from(data, offset)
            end = offset + _LENGTH.size + length
            if end > len(data):
                break
            records.append(data[offset + _LENGTH.size : end])
            offset = end
        if offset != len(data):
            logging.warning(f"Truncating {len(data) - offset} torn bytes at the end of {self.path}")
            with open(self.path, "r+b") as f:
                f.truncate(offset)
        return records

    def append(self, record: bytes) -> None:
        with open(self.path, "ab") as f:
            f.write(_LENGTH.pack(len(record)) + record)
            f.flush()
            os.fsync(f.fileno())
        self._records.append(record)

    def __iter__(self) -> Iterator[bytes]:
        return iter(list(self._records))

    def __len__(self) -> int:
        return len(self._records)


def write_json_atomic(path: Path, payload: Any) -> None:
    """Writes JSON through a temp file and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_json(path: Path) -> Any | None:
    path = Path(path)
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as f:
        return json.load(f)
