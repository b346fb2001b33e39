"""Sender-side rate shaping used to emulate a degraded NIC on a real endpoint."""

from __future__ import annotations

import threading
import time
from typing import Sequence

from ..clock import Clock, ClockMode
from ..netmodel import GBPS_TO_BYTES_PER_US, AnomalyEffect, AnomalyEvent

REFILL_US = 1000.0


class EgressShaper:
    """Token bucket over a rank's aggregate egress, driven by an anomaly timeline.

    Tokens are added in whole 1 ms quanta at ``base_gbps`` times the product
    of the BANDWIDTH_SCALE factors active at refill time. Senders may overdraw
    by one piece, then wait until the balance is positive again. Timeline
    times are microseconds on ``clock``.
    """

    def __init__(self, base_gbps: float, timeline: Sequence[AnomalyEvent] = (), clock: Clock | None = None):
        if not base_gbps > 0:
            raise ValueError("base_gbps must be > 0")
        self.base_gbps = base_gbps
        self.timeline = sorted(timeline, key=lambda e: e.at_us)
        self.clock = clock or Clock(ClockMode.REAL)
        self._lock = threading.Lock()
        self._tokens = 0.0
        self._last_refill = self.clock.now_us

    def scale(self, t_us: float) -> float:
        f = 1.0
        for ev in self.timeline:
            if ev.active(t_us):
                if ev.effect is AnomalyEffect.BANDWIDTH_SCALE:
                    f *= ev.value
                elif ev.effect is AnomalyEffect.LINK_DOWN:
                    return 0.0
        return f

    def added_latency_us(self, t_us: float) -> float:
        return sum(ev.value for ev in self.timeline
                   if ev.effect is AnomalyEffect.ADDED_LATENCY and ev.active(t_us))

    def rate_bytes_per_us(self, t_us: float) -> float:
        return self.base_gbps * GBPS_TO_BYTES_PER_US * self.scale(t_us)

    def admit_frame(self) -> None:
        """Delay the start of a frame by any ADDED_LATENCY in force."""
        extra = self.added_latency_us(self.clock.now_us)
        if extra > 0:
            self.clock.sleep_until(self.clock.now_us + extra)

    def _refill(self, now: float) -> None:
        quanta = int((now - self._last_refill) // REFILL_US)
        if quanta <= 0:
            return
        cap = self.rate_bytes_per_us(now) * REFILL_US
        self._tokens = min(cap, self._tokens + quanta * cap)
        self._last_refill += quanta * REFILL_US

    def acquire(self, nbytes: int) -> None:
        """Block until ``nbytes`` may leave the endpoint."""
        while True:
            with self._lock:
                now = self.clock.now_us
                self._refill(now)
                if self._tokens > 0:
                    self._tokens -= nbytes
                    return
                wait_us = self._last_refill + REFILL_US - now
            time.sleep(max(wait_us, 50.0) / 1e6)
