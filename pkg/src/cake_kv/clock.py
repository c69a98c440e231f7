"""Virtual and wall clocks shared by the compute and fetch workers.

Both clocks report time in integer microseconds since the clock was
created.  The worker code is identical in both modes; only the clock
decides whether a ``sleep_until`` blocks for real.

:class:`VirtualClock` is a conservative discrete-event kernel for real
threads.  Each worker thread ``attach``-es before it starts and
``detach``-es when it finishes.  A thread calling ``sleep_until`` parks;
once every attached thread is parked, the clock jumps to the earliest
wake-up and releases exactly that thread.  At most one worker runs at a
time, so runs are deterministic.  Equal wake-up times are ordered by
``priority`` (lower first), then by arrival.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time

__all__ = ["Clock", "VirtualClock", "WallClock", "make_clock"]


class Clock:
    virtual: bool = False

    def now(self) -> int:
        raise NotImplementedError

    def sleep_until(self, t_us: int, priority: int = 0) -> None:
        raise NotImplementedError

    def sleep(self, duration_us: int, priority: int = 0) -> None:
        self.sleep_until(self.now() + duration_us, priority)

    def attach(self) -> None:
        pass

    def detach(self) -> None:
        pass


class VirtualClock(Clock):
    virtual = True

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._now = 0
        self._heap: list[tuple[int, int, int, threading.Event]] = []
        self._seq = itertools.count()
        self._running = 0

    def now(self) -> int:
        return self._now

    def attach(self) -> None:
        with self._lock:
            self._running += 1

    def detach(self) -> None:
        with self._lock:
            self._running -= 1
            self._dispatch()

    def sleep_until(self, t_us: int, priority: int = 0) -> None:
        wake = threading.Event()
        with self._lock:
            heapq.heappush(self._heap, (max(int(t_us), self._now), priority, next(self._seq), wake))
            self._running -= 1
            self._dispatch()
        wake.wait()

    def _dispatch(self) -> None:
        if self._running == 0 and self._heap:
            t, _, _, wake = heapq.heappop(self._heap)
            self._now = t
            self._running += 1
            wake.set()


DEFAULT_SPIN_US = 2_000


class WallClock(Clock):
    """Real time.

    The last ``spin_us`` of every wait is spent yielding (``sleep(0)``
    releases the GIL) instead of blocking.  A blocked thread can let the
    CPU go idle, and on virtual machines waking an idle vCPU can take
    10 ms or more, which is larger than a throttle slice.
    """

    def __init__(self, spin_us: int = DEFAULT_SPIN_US) -> None:
        self._t0 = time.perf_counter_ns()
        self.spin_us = spin_us

    def now(self) -> int:
        return (time.perf_counter_ns() - self._t0) // 1000

    def sleep_until(self, t_us: int, priority: int = 0) -> None:
        while (remaining := t_us - self.now()) > 0:
            time.sleep((remaining - self.spin_us) / 1e6 if remaining > self.spin_us else 0)


def make_clock(mode: str) -> Clock:
    if mode == "sim":
        return VirtualClock()
    if mode == "live":
        return WallClock()
    raise ValueError(f"clock mode must be 'sim' or 'live', got {mode!r}")
