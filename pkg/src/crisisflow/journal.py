"""Append-only NDJSON event journal with gapless sequence numbers.

Human-decision events (feedback, incident create/merge) are fsynced before
the append call returns; triage results are recomputable and only flushed.
Recovery reads the file back and fails fast at the first gap or corrupt
line, reporting the last good sequence number.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Union


class EventKind(str, Enum):
    MESSAGE_ADMITTED = "message_admitted"
    TRIAGE_RESULT = "triage_result"
    INCIDENT_CREATED = "incident_created"
    INCIDENT_MERGED = "incident_merged"
    FEEDBACK = "feedback"
    NOTIFICATION = "notification"
    QUARANTINE = "quarantine"


FSYNC_KINDS = frozenset(
    {EventKind.FEEDBACK, EventKind.INCIDENT_CREATED, EventKind.INCIDENT_MERGED}
)


@dataclass(frozen=True)
class JournalEvent:
    seq: int
    at_ms: int
    kind: EventKind
    payload: dict

    def to_line(self) -> str:
        return json.dumps(
            {"seq": self.seq, "at_ms": self.at_ms, "kind": self.kind.value, "payload": self.payload},
            ensure_ascii=False,
            sort_keys=True,
        )

    @classmethod
    def from_line(cls, line: str) -> "JournalEvent":
        data = json.loads(line)
        return cls(
            seq=int(data["seq"]),
            at_ms=int(data["at_ms"]),
            kind=EventKind(data["kind"]),
            payload=data["payload"],
        )


class RecoveryError(Exception):
    def __init__(self, message: str, last_good_seq: int):
        super().__init__(f"{message} (last good seq {last_good_seq})")
        self.last_good_seq = last_good_seq


def read_journal(path: Union[str, Path]) -> list[JournalEvent]:
    """Load and verify a journal file: seq must run 1, 2, 3, ... gapless."""
    events: list[JournalEvent] = []
    last_good = 0
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            try:
                event = JournalEvent.from_line(line)
            except (ValueError, KeyError, TypeError) as exc:
                raise RecoveryError(f"corrupt journal line: {exc}", last_good)
            if event.seq != last_good + 1:
                raise RecoveryError(
                    f"sequence gap: expected {last_good + 1}, found {event.seq}", last_good
                )
            events.append(event)
            last_good = event.seq
    return events


class Journal:
    """In-memory event log mirrored to an NDJSON file.

    One writer appends; any number of readers consume via events_since and
    wait_for. Opening an existing file loads (and verifies) its events so
    appends continue the sequence.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self._events: list[JournalEvent] = []
        self._cond = threading.Condition()
        self._handle = None
        if self.path is not None:
            if self.path.exists():
                self._events = read_journal(self.path)
            self._handle = open(self.path, "a", encoding="utf-8")

    @property
    def last_seq(self) -> int:
        with self._cond:
            return self._events[-1].seq if self._events else 0

    def append(self, kind: EventKind, payload: dict, at_ms: Optional[int] = None) -> JournalEvent:
        with self._cond:
            event = JournalEvent(
                seq=(self._events[-1].seq if self._events else 0) + 1,
                at_ms=at_ms if at_ms is not None else int(time.time() * 1000),
                kind=kind,
                payload=payload,
            )
            if self._handle is not None:
                self._handle.write(event.to_line() + "\n")
                self._handle.flush()
                if kind in FSYNC_KINDS:
                    os.fsync(self._handle.fileno())
            self._events.append(event)
            self._cond.notify_all()
        return event

    def events_since(self, seq: int) -> list[JournalEvent]:
        """Events with seq strictly greater than the given one."""
        with self._cond:
            return [e for e in self._events if e.seq > seq]

    def all_events(self) -> list[JournalEvent]:
        with self._cond:
            return list(self._events)

    def wait_for(self, seq: int, timeout: float = 1.0) -> list[JournalEvent]:
        """Block until an event past seq exists, or the timeout passes."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while not self._events or self._events[-1].seq <= seq:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._cond.wait(remaining)
            return [e for e in self._events if e.seq > seq]

    def close(self) -> None:
        with self._cond:
            if self._handle is not None:
                self._handle.flush()
                self._handle.close()
                self._handle = None
