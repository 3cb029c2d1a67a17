"""Clock abstraction so rate limiting, backoff, and timestamps are testable.

Production uses the system clock; tests use a virtual clock whose ``sleep``
advances time instantly, making waits and timestamps fully deterministic.
"""
from __future__ import annotations

import threading
import time
from datetime import datetime, timedelta, timezone
from typing import Protocol

# 2000-01-01T00:00:00Z, the timestamp origin used by --fixed-clock runs
FIXED_EPOCH = datetime(2000, 1, 1, tzinfo=timezone.utc)


class Clock(Protocol):
    def monotonic(self) -> float:
        ...

    def sleep(self, seconds: float) -> None:
        ...

    def utc_iso(self) -> str:
        """Current wall time as an ISO-8601 UTC string with second precision."""
        ...


class SystemClock:
    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def utc_iso(self) -> str:
        return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class VirtualClock:
    """Deterministic clock: time moves only when someone sleeps."""

    def __init__(self, start: datetime = FIXED_EPOCH) -> None:
        self._elapsed = 0.0
        self._start = start
        self._lock = threading.Lock()

    def monotonic(self) -> float:
        with self._lock:
            return self._elapsed

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            with self._lock:
                self._elapsed += seconds

    def utc_iso(self) -> str:
        now = self._start + timedelta(seconds=int(self.monotonic()))
        return now.strftime("%Y-%m-%dT%H:%M:%SZ")
