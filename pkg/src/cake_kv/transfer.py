"""Back-to-front asynchronous fetch worker.

The engine owns one worker thread per request.  Tasks are pushed in the
order they should be fetched (highest chunk index first); a destination
buffer is allocated for each task as soon as it is pushed.  The worker
pops tasks, optionally asks a claim hook for permission, reads the chunk
under bandwidth throttling and publishes it to the :class:`ResidentSet`.

In simulation the read is a virtual-clock sleep of exactly
``fetch_latency``.  Live, the payload is read from the chunk store in
fixed-size slices and a token-bucket style throttle delays each slice so
cumulative throughput tracks the trace.
"""

from __future__ import annotations

import collections
import logging
import random
import threading
from dataclasses import dataclass
from typing import Callable, Iterable

from .clock import Clock
from .codecs import IDENTITY, Codec
from .model import BandwidthTrace, ChunkSpec, fetch_latency, to_us
from .store import ChunkKey, ChunkStore, StoreError

logger = logging.getLogger(__name__)

DEFAULT_QUANTUM = 4 * 1024 * 1024
DEFAULT_MAX_LAG_US = 25_000
PACE_SLACK_US = 1_000
DEFAULT_CATCHUP = 0.075
PRIORITY_IO = 1
MIB = 1024 * 1024


class EngineStopped(RuntimeError):
    pass


@dataclass(frozen=True)
class FetchTask:
    key: ChunkKey
    chunk: ChunkSpec
    encoded_bytes: int
    uncompressed_bytes: int | None = None

    def __post_init__(self) -> None:
        if self.encoded_bytes <= 0:
            raise ValueError("encoded_bytes must be > 0")


@dataclass(frozen=True)
class FetchRecord:
    index: int
    key: ChunkKey
    start_us: int
    finish_us: int
    nbytes: int


class ResidentSet:
    """Keys whose payloads are fully in memory, with completion times."""

    def __init__(self) -> None:
        self._done: dict[ChunkKey, int] = {}
        self._lock = threading.Lock()

    def add(self, key: ChunkKey, t_us: int) -> None:
        with self._lock:
            if key in self._done:
                raise ValueError(f"{key!r} is already resident")
            self._done[key] = t_us

    def __contains__(self, key: ChunkKey) -> bool:
        return key in self._done

    def __len__(self) -> int:
        return len(self._done)

    def completed_at(self, key: ChunkKey) -> int:
        return self._done[key]

    def snapshot(self) -> dict[ChunkKey, int]:
        with self._lock:
            return dict(self._done)


class Throttle:
    """Releases bytes no faster than the trace allows.

    Before each slice the caller blocks until the trace integral since the
    throttle epoch covers everything released so far plus the slice.  A
    reader that falls behind (file open, page faults, scheduler hiccup) may
    catch up, at no more than ``1 + catchup_headroom`` times the trace rate,
    so a stall is repaid gradually instead of in one burst.  Lag beyond
    ``max_lag_us`` (or one quantum's worth of time, if larger) is forgiven:
    the epoch restarts.
    """

    def __init__(
        self,
        trace: BandwidthTrace,
        clock: Clock,
        quantum_bytes: int = DEFAULT_QUANTUM,
        max_lag_us: int = DEFAULT_MAX_LAG_US,
        catchup_headroom: float = DEFAULT_CATCHUP,
    ):
        if quantum_bytes < 1:
            raise ValueError("quantum_bytes must be >= 1")
        if catchup_headroom < 0:
            raise ValueError("catchup_headroom must be >= 0")
        self.trace = trace
        self.clock = clock
        self.quantum_bytes = quantum_bytes
        self.max_lag_us = max_lag_us
        self.catchup_headroom = catchup_headroom
        self.consumed_bytes = 0
        self.log: list[tuple[int, int]] = []
        self._epoch_us: int | None = None
        self._since_epoch = 0
        self._paced_us: int | None = None

    @property
    def consumed_bits(self) -> int:
        return self.consumed_bytes * 8

    def _target(self, nbytes: int) -> int:
        epoch_ms = self._epoch_us / 1000.0
        return self._epoch_us + to_us(fetch_latency(self.trace, self._since_epoch + nbytes, epoch_ms))

    def acquire(self, nbytes: int) -> None:
        now = self.clock.now()
        if self._epoch_us is None:
            self._epoch_us, self._since_epoch = now, 0
        target = self._target(nbytes)
        lag_allowance = max(
            self.max_lag_us, to_us(fetch_latency(self.trace, self.quantum_bytes, now / 1000.0))
        )
        if now - target > lag_allowance:
            self._epoch_us, self._since_epoch = now, 0
            target = self._target(nbytes)
        elif self._paced_us is not None:
            # pace off the previous scheduled slot, not the actual wake-up, so
            # sleep overshoot never accumulates
            anchor = max(self._paced_us, now - PACE_SLACK_US)
            slot_ms = fetch_latency(self.trace, nbytes, anchor / 1000.0)
            target = max(target, anchor + to_us(slot_ms / (1.0 + self.catchup_headroom)))
        self._paced_us = target
        self.clock.sleep_until(target, PRIORITY_IO)
        self._since_epoch += nbytes

    def delivered(self, nbytes: int) -> None:
        self.consumed_bytes += nbytes
        self.log.append((self.clock.now(), self.consumed_bytes))


class TransferEngine:
    def __init__(
        self,
        clock: Clock,
        trace: BandwidthTrace,
        store: ChunkStore | None = None,
        codec: Codec = IDENTITY,
        *,
        quantum_bytes: int = DEFAULT_QUANTUM,
        decode_us_per_mib: float = 0.0,
        claim: Callable[[FetchTask], bool] | None = None,
        on_event: Callable[[str, int], None] | None = None,
        jitter_us: int = 0,
        seed: int | None = None,
        keep_payloads: bool = True,
    ) -> None:
        if not clock.virtual and store is None:
            raise ValueError("live fetching needs a chunk store")
        self.clock = clock
        self.trace = trace
        self.store = store
        self.codec = codec
        self.quantum_bytes = quantum_bytes
        self.decode_us_per_mib = decode_us_per_mib
        self.claim = claim
        self.on_event = on_event
        self.jitter_us = jitter_us
        self.keep_payloads = keep_payloads
        self.throttle = Throttle(trace, clock, quantum_bytes)
        self.resident = ResidentSet()
        self.records: list[FetchRecord] = []
        self.error: BaseException | None = None
        self._rng = random.Random(seed)
        self._queue: collections.deque[FetchTask] = collections.deque()
        self._buffers: dict[ChunkKey, bytearray] = {}
        self._payloads: dict[ChunkKey, tuple[bytearray, int]] = {}
        self._lock = threading.Lock()
        self._stopped = False
        self._thread: threading.Thread | None = None

    @property
    def reads_payload(self) -> bool:
        return not self.clock.virtual

    def push_seq(self, tasks: Iterable[FetchTask]) -> None:
        tasks = list(tasks)
        with self._lock:
            if self._stopped:
                raise EngineStopped("push_seq after stop")
            if self.reads_payload:
                fresh = {}
                try:
                    for t in tasks:
                        fresh[t.key] = bytearray(t.encoded_bytes)
                except MemoryError:
                    raise MemoryError(
                        f"cannot preallocate {sum(t.encoded_bytes for t in tasks)} bytes of fetch buffers"
                    ) from None
                self._buffers.update(fresh)
            self._queue.extend(tasks)

    def is_resident(self, key: ChunkKey) -> bool:
        return key in self.resident

    def pending(self) -> int:
        return len(self._queue)

    def stop(self) -> None:
        with self._lock:
            if self._stopped:
                return
            self._stopped = True
            dropped = list(self._queue)
            self._queue.clear()
            for t in dropped:
                self._buffers.pop(t.key, None)
        if self.on_event:
            self.on_event("stop", -1)

    @property
    def stopped(self) -> bool:
        return self._stopped

    def start(self) -> None:
        if self._thread is not None:
            raise RuntimeError("engine already started")
        self.clock.attach()
        self._thread = threading.Thread(target=self._run, name="cake-fetch", daemon=True)
        self._thread.start()

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def payload(self, key: ChunkKey) -> bytes:
        """Decoded payload of a resident chunk (live mode only)."""
        if key not in self.resident:
            raise KeyError(key)
        raw, original = self._payloads[key]
        return self.codec.decode(raw, original)

    def _next(self) -> FetchTask | None:
        with self._lock:
            if self._stopped or not self._queue:
                return None
            return self._queue.popleft()

    def _run(self) -> None:
        try:
            self.clock.sleep_until(self.clock.now(), PRIORITY_IO)
            while (task := self._next()) is not None:
                if self.claim is not None and not self.claim(task):
                    with self._lock:
                        self._buffers.pop(task.key, None)
                    break
                if self.jitter_us:
                    self.clock.sleep(self._rng.randint(0, self.jitter_us), PRIORITY_IO)
                start = self.clock.now()
                if self.on_event:
                    self.on_event("fetch_start", task.chunk.index)
                finish = self.throttled_read(task, start)
                self.resident.add(task.key, finish)
                self.records.append(FetchRecord(task.chunk.index, task.key, start, finish, task.encoded_bytes))
                if self.on_event:
                    self.on_event("fetch_done", task.chunk.index)
        except BaseException as exc:  # surfaced by the scheduler after join
            self.error = exc
            logger.error("fetch worker aborted: %s", exc)
            self.stop()
        finally:
            self.clock.detach()

    def _decode_us(self, task: FetchTask) -> int:
        if not self.decode_us_per_mib:
            return 0
        raw = task.uncompressed_bytes if task.uncompressed_bytes is not None else task.encoded_bytes
        return int(round(self.decode_us_per_mib * raw / MIB))

    def throttled_read(self, task: FetchTask, start: int) -> int:
        """Fetch one chunk starting at ``start`` (us); returns the completion time."""
        if self.clock.virtual:
            d = to_us(fetch_latency(self.trace, task.encoded_bytes, start / 1000.0))
            done = start + d + self._decode_us(task)
            self.clock.sleep_until(done, PRIORITY_IO)
            self.throttle.consumed_bytes += task.encoded_bytes
            return done
        return self._live_read(task)

    def _live_read(self, task: FetchTask) -> int:
        buf = self._buffers.get(task.key)
        if buf is None:
            buf = bytearray(task.encoded_bytes)
        view = memoryview(buf)
        fh, meta = self.store.open_chunk(task.key)
        with fh:
            if meta.encoded_bytes != task.encoded_bytes:
                raise StoreError(
                    f"chunk {task.chunk.index}: store holds {meta.encoded_bytes} bytes, "
                    f"task expects {task.encoded_bytes}"
                )
            pos = 0
            while pos < task.encoded_bytes:
                n = min(self.quantum_bytes, task.encoded_bytes - pos)
                self.throttle.acquire(n)
                got = fh.readinto(view[pos : pos + n])
                if got != n:
                    raise StoreError(f"short read on chunk {task.chunk.index}")
                pos += n
                self.throttle.delivered(n)
        decode = self._decode_us(task)
        if decode:
            self.clock.sleep(decode, PRIORITY_IO)
        with self._lock:
            self._buffers.pop(task.key, None)
            if self.keep_payloads:
                self._payloads[task.key] = (buf, meta.uncompressed_bytes)
        return self.clock.now()
