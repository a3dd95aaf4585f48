from __future__ import annotations

import collections
import threading
import time
from typing import Callable


class RateLimiter:
    """Sliding-window limiter: at most ``per_minute`` acquisitions in any 60 s window."""

    def __init__(self, per_minute: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep, window_s: float = 60.0):
        self.per_minute = per_minute
        self.window_s = window_s
        self._clock = clock
        self._sleep = sleep
        self._issued: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a slot is free; returns the issue time."""
        while True:
            with self._lock:
                now = self._clock()
                while self._issued and now - self._issued[0] >= self.window_s:
                    self._issued.popleft()
                if len(self._issued) < self.per_minute:
                    self._issued.append(now)
                    return now
                wait = self.window_s - (now - self._issued[0])
            # floor keeps a rounding-sized wait from spinning without advancing the clock
            self._sleep(max(wait, 0.001))
