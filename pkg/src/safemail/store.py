"""Append-only record logs and atomically replaced files.

A log file is a sequence of ``u32 length || u32 crc32 || payload`` records.
Records are written header first, then payload, then fsynced; a crash can
therefore leave a torn tail, which ``read_log`` cuts off on the next open.

Whole files (account records, depot entries) are written to ``<name>.tmp``,
fsynced, and renamed into place. Leftover ``.tmp`` files are garbage.

Every persistence step calls ``crashpoint(site)`` first. Tests install a hook
there that raises mid-operation to emulate a process dying at that point.
"""

from __future__ import annotations

import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Callable, Iterator, Optional

log = logging.getLogger(__name__)

_HEADER = struct.Struct(">II")
MAX_RECORD = 64 * 1024 * 1024

CrashHook = Callable[[str], None]


class SimulatedCrash(BaseException):
    """Raised by test hooks; BaseException so provider error handling can't swallow it."""


class Persistence:
    def __init__(self, fsync: bool = True, crash_hook: Optional[CrashHook] = None):
        self.fsync = fsync
        self.crash_hook = crash_hook

    def crashpoint(self, site: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(site)

    def _sync(self, fd: int) -> None:
        if self.fsync:
            os.fsync(fd)

    def append(self, path: Path, payload: bytes) -> int:
        """Append one record; returns bytes written."""
        header = _HEADER.pack(len(payload), zlib.crc32(payload))
        self.crashpoint(f"append-begin:{path.name}")
        fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o600)
        try:
            os.write(fd, header)
            self.crashpoint(f"append-header:{path.name}")
            os.write(fd, payload)
            self.crashpoint(f"append-payload:{path.name}")
            self._sync(fd)
        finally:
            os.close(fd)
        self.crashpoint(f"append-synced:{path.name}")
        return len(header) + len(payload)

    def write_atomic(self, path: Path, data: bytes) -> None:
        tmp = path.with_name(path.name + ".tmp")
        self.crashpoint(f"atomic-begin:{path.name}")
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        try:
            half = len(data) // 2
            os.write(fd, data[:half])
            self.crashpoint(f"atomic-partial:{path.name}")
            os.write(fd, data[half:])
            self._sync(fd)
        finally:
            os.close(fd)
        self.crashpoint(f"atomic-written:{path.name}")
        os.replace(tmp, path)
        self.crashpoint(f"atomic-renamed:{path.name}")
        self._sync_dir(path.parent)

    def mkdir(self, path: Path) -> None:
        self.crashpoint(f"mkdir:{path.name}")
        path.mkdir(parents=True, exist_ok=True)
        self._sync_dir(path.parent)

    def unlink(self, path: Path) -> None:
        self.crashpoint(f"unlink:{path.name}")
        try:
            path.unlink()
        except FileNotFoundError:
            pass

    def _sync_dir(self, path: Path) -> None:
        if not self.fsync:
            return
        fd = os.open(path, os.O_RDONLY)
        try:
            os.fsync(fd)
        finally:
            os.close(fd)


def read_log(path: Path, repair: bool = True) -> Iterator[bytes]:
    """Yield intact records. A torn or corrupt tail is truncated when ``repair``."""
    if not path.exists():
        return
    data = path.read_bytes()
    pos = 0
    good = 0
    records = []
    while pos < len(data):
        if pos + _HEADER.size > len(data):
            break
        length, crc = _HEADER.unpack_from(data, pos)
        start = pos + _HEADER.size
        if length > MAX_RECORD or start + length > len(data):
            break
        payload = data[start:start + length]
        if zlib.crc32(payload) != crc:
            break
        records.append(payload)
        pos = start + length
        good = pos
    if good != len(data):
        log.warning("%s: dropping %d bytes of torn tail", path, len(data) - good)
        if repair:
            with open(path, "r+b") as f:
                f.truncate(good)
    yield from records


def log_is_clean(path: Path) -> bool:
    """True if every byte of the file belongs to an intact record."""
    if not path.exists():
        return True
    size = path.stat().st_size
    total = sum(_HEADER.size + len(r) for r in read_log(path, repair=False))
    return total == size


def remove_temp_files(root: Path) -> int:
    n = 0
    for tmp in root.rglob("*.tmp"):
        tmp.unlink()
        n += 1
    return n
