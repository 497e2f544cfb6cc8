"""Injectable clocks and a single-threaded event scheduler for virtual time."""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Callable

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000

# Virtual wall clock starts at a fixed epoch so token timestamps are reproducible.
VIRTUAL_EPOCH_S = 1_700_000_000


def seconds(s: float) -> int:
    return int(round(s * NS_PER_S))


def millis(ms: float) -> int:
    return int(round(ms * NS_PER_MS))


class RealClock:
    virtual = False

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def wall(self) -> float:
        return time.time()

    def sleep(self, duration_s: float) -> None:
        if duration_s > 0:
            time.sleep(duration_s)


class VirtualClock:
    """Logical time that only moves when advanced.

    ``sleep`` advances the clock directly, which is what tests driving a
    component by hand expect. Code running under a :class:`Scheduler` should
    schedule a callback instead of sleeping.
    """

    virtual = True

    def __init__(self, start_ns: int = 0, epoch_s: float = VIRTUAL_EPOCH_S):
        self._now = start_ns
        self._epoch_s = epoch_s
        self._lock = threading.Lock()

    def now_ns(self) -> int:
        return self._now

    def wall(self) -> float:
        return self._epoch_s + self._now / NS_PER_S

    def advance(self, duration_s: float) -> int:
        return self.advance_ns(seconds(duration_s))

    def advance_ns(self, delta_ns: int) -> int:
        if delta_ns < 0:
            raise ValueError("virtual time cannot move backwards")
        with self._lock:
            self._now += delta_ns
            return self._now

    def set_ns(self, t_ns: int) -> None:
        with self._lock:
            if t_ns < self._now:
                raise ValueError("virtual time cannot move backwards")
            self._now = t_ns

    def sleep(self, duration_s: float) -> None:
        if duration_s > 0:
            self.advance(duration_s)


Clock = RealClock | VirtualClock


class Scheduler:
    """Discrete-event loop over a :class:`VirtualClock`.

    Events at the same instant run in scheduling order, so a run is a pure
    function of the callbacks and the seed they draw from.
    """

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self._queue: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = itertools.count()

    def at(self, t_ns: int, fn: Callable[[], None]) -> None:
        t_ns = max(t_ns, self.clock.now_ns())
        heapq.heappush(self._queue, (t_ns, next(self._seq), fn))

    def after(self, delay_ns: int, fn: Callable[[], None]) -> None:
        self.at(self.clock.now_ns() + max(0, delay_ns), fn)

    def pending(self) -> int:
        return len(self._queue)

    def next_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def run_until(self, t_ns: int) -> None:
        while self._queue and self._queue[0][0] <= t_ns:
            when, _, fn = heapq.heappop(self._queue)
            self.clock.set_ns(when)
            fn()
        if self.clock.now_ns() < t_ns:
            self.clock.set_ns(t_ns)

    def run(self, limit_ns: int | None = None) -> None:
        """Run until the queue is empty or the next event lies past ``limit_ns``."""
        while self._queue:
            if limit_ns is not None and self._queue[0][0] > limit_ns:
                return
            when, _, fn = heapq.heappop(self._queue)
            self.clock.set_ns(when)
            fn()
