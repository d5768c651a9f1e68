"""Append-only record file with torn-write recovery.

Each record is ``u32 length | sha256(payload) | payload``.  On open the
file is scanned front to back; an incomplete or checksum-failing final
record is a torn write and is cut off.  A bad record anywhere else is
real corruption and refuses to load.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

_HEADER = struct.Struct(">I32s")
MAX_RECORD = 64 * 1024 * 1024


class CorruptLogError(Exception):
    pass


def _frame(payload: bytes) -> bytes:
    return _HEADER.pack(len(payload), hashlib.sha256(payload).digest()) + payload


class AppendOnlyLog:
    def __init__(self, path: str | os.PathLike, *, fsync: bool = True) -> None:
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._records: list[bytes] = []
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.recovered_bytes = self._load()
        self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o600)

    def _load(self) -> int:
        """Scan the file, returning the number of torn bytes truncated."""
        if not self.path.exists():
            return 0
        data = self.path.read_bytes()
        pos, size = 0, len(data)
        while pos < size:
            if pos + _HEADER.size > size:
                break
            length, checksum = _HEADER.unpack_from(data, pos)
            end = pos + _HEADER.size + length
            if length > MAX_RECORD or end > size:
                break
            payload = data[pos + _HEADER.size:end]
            if hashlib.sha256(payload).digest() != checksum:
                if end == size:
                    break
                raise CorruptLogError(f"{self.path}: checksum failure in record {len(self._records)} at byte {pos}")
            self._records.append(payload)
            pos = end
        torn = size - pos
        if torn:
            logger.warning("%s: truncating %d torn bytes after record %d", self.path, torn, len(self._records))
            with open(self.path, "r+b") as fh:
                fh.truncate(pos)
                fh.flush()
                os.fsync(fh.fileno())
        return torn

    def append(self, payload: bytes) -> int:
        """Durably append one record and return its index."""
        frame = _frame(bytes(payload))
        with self._lock:
            os.write(self._fd, frame)
            if self.fsync:
                os.fsync(self._fd)
            self._records.append(bytes(payload))
            return len(self._records) - 1

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, index: int) -> bytes:
        return self._records[index]

    def __iter__(self) -> Iterator[bytes]:
        return iter(self._records[: len(self._records)])

    def snapshot(self) -> list[bytes]:
        return self._records[: len(self._records)]

    def rewrite(self, payloads: Iterable[bytes]) -> None:
        """Atomically replace the whole file; used for prefix truncation."""
        payloads = [bytes(p) for p in payloads]
        tmp = self.path.with_name(self.path.name + ".tmp")
        with self._lock:
            with open(tmp, "wb") as fh:
                for p in payloads:
                    fh.write(_frame(p))
                fh.flush()
                os.fsync(fh.fileno())
            os.close(self._fd)
            os.replace(tmp, self.path)
            self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND, 0o600)
            self._records = payloads

    def close(self) -> None:
        with self._lock:
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1


def write_records(path: str | os.PathLike, payloads: Iterable[bytes]) -> None:
    """Write a record file from scratch (fixtures and tamper hooks)."""
    with open(path, "wb") as fh:
        for p in payloads:
            fh.write(_frame(bytes(p)))


def read_records(path: str | os.PathLike) -> list[bytes]:
    """Read every complete record without repairing the file."""
    data = Path(path).read_bytes()
    out, pos = [], 0
    while pos + _HEADER.size <= len(data):
        length, checksum = _HEADER.unpack_from(data, pos)
        end = pos + _HEADER.size + length
        if end > len(data):
            break
        out.append(data[pos + _HEADER.size:end])
        pos = end
    return out
