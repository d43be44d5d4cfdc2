"""Token-bucket traffic shaping.

One bucket per hosted service; every session of that service draws
from the same bucket, so concurrent streams share the configured rate.
The bucket starts full: a burst no larger than the capacity passes
without delay, and sustained transfers settle at the refill rate.
"""

from __future__ import annotations

import threading
import time


class TokenBucket:
    def __init__(
        self,
        rate_bytes_per_sec: float,
        capacity: float | None = None,
        clock=time.monotonic,
        sleeper=time.sleep,
    ):
        if rate_bytes_per_sec <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate_bytes_per_sec)
        # default burst allowance: one second of traffic
        self.capacity = float(capacity) if capacity is not None else self.rate
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        self._clock = clock
        self._sleep = sleeper
        self._tokens = self.capacity
        self._last = clock()
        self._lock = threading.Lock()

    def _refill_locked(self):
        now = self._clock()
        elapsed = now - self._last
        if elapsed > 0:
            self._tokens = min(self.capacity, self._tokens + elapsed * self.rate)
            self._last = now

    def take(self, nbytes: int) -> float:
        """Block until nbytes of budget is available; returns seconds waited.

        Requests larger than the capacity are drained in capacity-sized
        chunks rather than rejected.
        """
        if nbytes < 0:
            raise ValueError("nbytes must be non-negative")
        waited = 0.0
        remaining = float(nbytes)
        while remaining > 0:
            chunk = min(remaining, self.capacity)
            while True:
                with self._lock:
                    self._refill_locked()
                    # epsilon guards against float absorption: a deficit
                    # of 1e-11 bytes would otherwise demand a sleep too
                    # short to advance any clock
                    if self._tokens + 1e-6 >= chunk:
                        self._tokens = max(0.0, self._tokens - chunk)
                        break
                    deficit = chunk - self._tokens
                    delay = max(deficit / self.rate, 1e-4)
                # sleep outside the lock so concurrent takers interleave
                self._sleep(delay)
                waited += delay
            remaining -= chunk
        return waited

    def available(self) -> float:
        with self._lock:
            self._refill_locked()
            return self._tokens
