"""Logical clock and task queue for the deterministic event loop.

Time is integer milliseconds. Tasks fire in (time, insertion order); there
is no wall-clock anywhere, so a run is fully determined by what gets
scheduled. Most public configuration speaks in seconds; the helpers here
convert once at the boundary.
"""

from __future__ import annotations

import heapq
from typing import Callable


def s_to_ms(seconds: float) -> int:
    return int(round(seconds * 1000))


def ms_to_s(ms: int) -> int:
    """Epoch seconds for a millisecond timestamp (floor)."""
    return ms // 1000


class SimClock:
    """Single-threaded discrete-event scheduler over logical time."""

    def __init__(self) -> None:
        self._now_ms = 0
        self._seq = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []

    @property
    def now_ms(self) -> int:
        return self._now_ms

    @property
    def now_s(self) -> int:
        return ms_to_s(self._now_ms)

    def schedule_at(self, at_ms: int, task: Callable[[], None]) -> None:
        if at_ms < self._now_ms:
            raise ValueError(f"cannot schedule in the past: {at_ms} < {self._now_ms}")
        heapq.heappush(self._heap, (at_ms, self._seq, task))
        self._seq += 1

    def schedule_in(self, delay_ms: int, task: Callable[[], None]) -> None:
        self.schedule_at(self._now_ms + max(0, delay_ms), task)

    def run_until(self, until_ms: int) -> None:
        """Fire every task due at or before `until_ms`, then advance to it.

        Tasks scheduled while running are honored if they fall inside the
        window, including tasks scheduled for the current instant.
        """
        if until_ms < self._now_ms:
            raise ValueError(f"time cannot go backwards: {until_ms} < {self._now_ms}")
        while self._heap and self._heap[0][0] <= until_ms:
            at_ms, _, task = heapq.heappop(self._heap)
            self._now_ms = at_ms
            task()
        self._now_ms = until_ms

    def pending(self) -> int:
        return len(self._heap)
