"""Event queue and event-log records.

Events at equal times are processed in (time, kind rank, sequence) order.
Kind ranks, lowest first::

    FlowComplete < LayerDone < TokenEmitted < BlockPersisted
    < RequestComplete < Arrival < FetchPE < FetchDE < Monitor

Flow completions found while advancing the fluid network are always handled
before timer events scheduled for the same instant.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional


class EventKind(enum.IntEnum):
    FlowComplete = 0
    LayerDone = 1
    TokenEmitted = 2
    BlockPersisted = 3
    RequestComplete = 4
    Arrival = 5
    FetchPE = 6
    FetchDE = 7
    Monitor = 8


@dataclass(order=True)
class SimEvent:
    time: float
    rank: int
    seq: int
    kind: EventKind = field(compare=False)
    action: Callable[[], None] = field(compare=False)
    payload: Any = field(default=None, compare=False)


class EventQueue:
    def __init__(self):
        self._heap: List[SimEvent] = []
        self._seq = itertools.count()

    def push(self, time: float, kind: EventKind, action: Callable[[], None], payload=None) -> SimEvent:
        ev = SimEvent(time, int(kind), next(self._seq), kind, action, payload)
        heapq.heappush(self._heap, ev)
        return ev

    def peek_time(self) -> float:
        return self._heap[0].time if self._heap else float("inf")

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)

    def __len__(self) -> int:
        return len(self._heap)


class EventLog:
    """Newline-delimited JSON records; disabled logs drop everything."""

    def __init__(self, enabled: bool = False):
        self.enabled = enabled
        self.records: List[dict] = []

    def emit(self, time: float, kind: str, request_id: Optional[str] = None, **extra) -> None:
        if not self.enabled:
            return
        rec = {"time": time, "kind": kind, "request_id": request_id}
        rec.update({k: v for k, v in extra.items() if v is not None})
        self.records.append(rec)

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())
