from __future__ import annotations

import threading
import time

from utils.datatypes import ClockMode
from utils.errors import ClockRegression


class Clock:
    """
    Monotone timestamp source for all decay and lifecycle math.

    Virtual mode only moves through ``advance``/``set`` so replays observe identical
    timestamps. Wall mode reports seconds since construction. Latency telemetry never
    uses this class; it reads ``wall_ns`` directly.
    """

    def __init__(self, mode: ClockMode = ClockMode.VIRTUAL, start: float = 0.0):
        self.mode = ClockMode(mode)
        self._lock = threading.Lock()
        self._now = float(start)
        self._origin = time.monotonic() - float(start)

    def now(self) -> float:
        with self._lock:
            if self.mode is ClockMode.WALL:
                self._now = max(self._now, time.monotonic() - self._origin)
            return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ClockRegression(self._now, self._now + dt)
        return self.set(self.now() + dt)

    def set(self, t: float) -> float:
        """Move the virtual clock to ``t``; moving backwards is an error"""
        if self.mode is not ClockMode.VIRTUAL:
            raise ValueError("only a virtual clock can be set")
        with self._lock:
            if t < self._now:
                raise ClockRegression(self._now, t)
            self._now = float(t)
            return self._now

    @staticmethod
    def wall_ns() -> int:
        return time.perf_counter_ns()
