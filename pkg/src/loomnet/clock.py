"""Virtual and wall clocks plus the discrete-event loop that drives virtual time."""

from __future__ import annotations

import enum
import heapq
import itertools
import time
from typing import Callable


class ClockMode(str, enum.Enum):
    VIRTUAL = "VIRTUAL"
    REAL = "REAL"


class Clock:
    """Microsecond clock.

    VIRTUAL clocks only move when :meth:`advance_to` is called (by an
    :class:`EventLoop`); REAL clocks read the monotonic clock relative to
    ``origin_ns``.
    """

    def __init__(self, mode: ClockMode | str = ClockMode.VIRTUAL, origin_ns: int | None = None):
        self.mode = ClockMode(mode)
        self._now = 0.0
        self.origin_ns = time.monotonic_ns() if origin_ns is None else origin_ns

    @property
    def now_us(self) -> float:
        if self.mode is ClockMode.VIRTUAL:
            return self._now
        return (time.monotonic_ns() - self.origin_ns) / 1000.0

    def advance_to(self, t_us: float) -> None:
        if self.mode is not ClockMode.VIRTUAL:
            raise RuntimeError("only virtual clocks can be advanced")
        if t_us < self._now:
            raise ValueError(f"clock cannot go backwards ({t_us} < {self._now})")
        self._now = t_us

    def sleep_until(self, t_us: float) -> None:
        """Block until ``t_us`` (REAL mode). Short waits are busy-waited."""
        if self.mode is ClockMode.VIRTUAL:
            self.advance_to(max(t_us, self._now))
            return
        while True:
            remaining = t_us - self.now_us
            if remaining <= 0:
                return
            if remaining > BUSY_WAIT_US:
                time.sleep((remaining - BUSY_WAIT_US) / 1e6)


# OS sleeps below this are too jittery; spin instead.
BUSY_WAIT_US = 50.0


class TimerHandle:
    __slots__ = ("when", "callback", "cancelled")

    def __init__(self, when: float, callback: Callable[[], None]):
        self.when = when
        self.callback = callback
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    """Deterministic discrete-event loop over a virtual :class:`Clock`.

    Events at equal timestamps fire in scheduling order.
    """

    def __init__(self, clock: Clock | None = None):
        self.clock = clock or Clock(ClockMode.VIRTUAL)
        if self.clock.mode is not ClockMode.VIRTUAL:
            raise ValueError("EventLoop needs a virtual clock")
        self._heap: list[tuple[float, int, TimerHandle]] = []
        self._seq = itertools.count()

    @property
    def now(self) -> float:
        return self.clock.now_us

    def call_at(self, when: float, callback: Callable[[], None]) -> TimerHandle:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        handle = TimerHandle(when, callback)
        heapq.heappush(self._heap, (when, next(self._seq), handle))
        return handle

    def call_later(self, delay: float, callback: Callable[[], None]) -> TimerHandle:
        return self.call_at(self.now + delay, callback)

    def call_soon(self, callback: Callable[[], None]) -> TimerHandle:
        return self.call_at(self.now, callback)

    def pending(self) -> bool:
        return any(not h.cancelled for _, _, h in self._heap)

    def step(self) -> bool:
        """Fire the next live event. Returns False if none is left."""
        while self._heap:
            when, _, handle = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.clock.advance_to(when)
            handle.callback()
            return True
        return False

    def run(self, until: float | None = None) -> None:
        """Process events until the queue drains (or virtual time passes ``until``)."""
        while self._heap:
            when, _, handle = self._heap[0]
            if until is not None and when > until:
                break
            heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.clock.advance_to(when)
            handle.callback()
