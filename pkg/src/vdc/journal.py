"""Append-only newline-delimited JSON journal.

Each line is ``{"seq", "ts", "event", "payload"}``. A final line without its
newline, or one that fails to parse, is a torn write: it is dropped on replay
and truncated away before the writer appends again. A bad line anywhere
else is corruption and aborts with its line number.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .errors import CorruptRecord
from .model import format_ts

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Record:
    seq: int
    ts: str
    event: str
    payload: dict

    def to_line(self) -> bytes:
        doc = {"seq": self.seq, "ts": self.ts, "event": self.event, "payload": self.payload}
        return (json.dumps(doc, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def _parse(line: bytes, lineno: int) -> Record:
    doc = json.loads(line.decode("utf-8"))
    if not isinstance(doc, dict):
        raise ValueError("record is not an object")
    seq, ts, event, payload = doc["seq"], doc["ts"], doc["event"], doc["payload"]
    if not isinstance(seq, int) or not isinstance(event, str) or not isinstance(payload, dict):
        raise ValueError("record fields have wrong types")
    return Record(seq, ts, event, payload)


def scan(path: str | os.PathLike) -> tuple[list[Record], int]:
    """Read every intact record; returns them with the byte length they span."""
    path = Path(path)
    if not path.exists():
        return [], 0
    data = path.read_bytes()
    records: list[Record] = []
    offset = 0
    lineno = 0
    last_seq = None
    while offset < len(data):
        lineno += 1
        nl = data.find(b"\n", offset)
        final = nl < 0 or nl == len(data) - 1
        if nl < 0:
            log.warning("dropping torn final record at line %d of %s", lineno, path)
            break
        raw = data[offset:nl]
        try:
            rec = _parse(raw, lineno)
            if last_seq is not None and rec.seq <= last_seq:
                raise ValueError(f"sequence {rec.seq} is not above {last_seq}")
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            if final:
                log.warning("dropping unparsable final record at line %d of %s", lineno, path)
                break
            raise CorruptRecord(f"corrupt journal record at line {lineno}: {exc}", line=lineno, path=str(path)) from None
        records.append(rec)
        last_seq = rec.seq
        offset = nl + 1
    return records, offset


class Journal:
    """Single-writer appender. Callers serialize access; the lock is a backstop."""

    def __init__(self, path: str | os.PathLike, *, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        records, good = scan(self.path)
        self.next_seq = records[-1].seq + 1 if records else 1
        self.recovered = records
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")
        if self._fh.tell() != good:
            self._fh.truncate(good)
            self._fh.seek(good)

    def append(self, event: str, payload: dict, ts: float) -> Record:
        with self._lock:
            rec = Record(self.next_seq, format_ts(ts), event, payload)
            self._fh.write(rec.to_line())
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            self.next_seq += 1
            return rec

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def __iter__(self) -> Iterator[Record]:
        return iter(scan(self.path)[0])
