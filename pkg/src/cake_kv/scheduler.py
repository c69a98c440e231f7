"""Bidirectional KV-cache acquisition: compute forward, fetch backward.

:func:`run` launches a compute worker on chunk 0 upward and a fetch worker
on chunk N-1 downward.  Each side takes a chunk only through
:meth:`ClaimTable.claim`, which is linearizable, so every chunk is
produced exactly once and the run ends when the two pointers cross.

Pointers are chunk indices.  A token-granular pointer pair lets both sides
start the final middle chunk; per-chunk claims close that race.
"""

from __future__ import annotations

import csv
import io
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, TextIO

from .clock import Clock, make_clock
from .codecs import IDENTITY, Codec, get_codec
from .compute import ComputeEngine, TokenBudget
from .model import (
    BandwidthTrace,
    ChunkSpec,
    CostModel,
    ModelProfile,
    RequestSpec,
    chunk_bytes,
    compute_latency,
    fetch_latency,
    to_us,
)
from .store import ChunkKey, ChunkStore, MissingChunkError, request_keys
from .transfer import DEFAULT_QUANTUM, FetchTask, TransferEngine

logger = logging.getLogger(__name__)

MODES = ("cake", "compute_only", "io_only")
SIDES = ("compute", "io")
EVENT_LOG_HEADER = ("index", "side", "start_us", "finish_us", "bytes")


class ClaimError(RuntimeError):
    """A side tried to claim a chunk its pointer does not designate."""


class RunAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class PointerState:
    compute_ptr: int
    io_ptr: int

    @property
    def crossed(self) -> bool:
        return self.compute_ptr > self.io_ptr


@dataclass(frozen=True)
class Claim:
    side: str
    at: int


class ClaimTable:
    def __init__(self, n_chunks: int, clock: Clock | None = None) -> None:
        if n_chunks < 1:
            raise ValueError("need at least one chunk")
        self.n_chunks = n_chunks
        self.clock = clock
        self._claims: list[Claim | None] = [None] * n_chunks
        self._compute_ptr = 0
        self._io_ptr = n_chunks - 1
        self._lock = threading.Lock()

    @property
    def pointers(self) -> PointerState:
        with self._lock:
            return PointerState(self._compute_ptr, self._io_ptr)

    def claim(self, side: str, index: int, at: int | None = None) -> bool:
        if at is None:
            at = self.clock.now() if self.clock is not None else 0
        with self._lock:
            if side == "compute":
                ptr = self._compute_ptr
            elif side == "io":
                ptr = self._io_ptr
            else:
                raise ValueError(f"unknown side {side!r}")
            if index != ptr:
                raise ClaimError(f"{side} claimed chunk {index} but its pointer is at {ptr}")
            if self._compute_ptr > self._io_ptr:
                return False
            self._claims[index] = Claim(side, at)
            if side == "compute":
                self._compute_ptr += 1
            else:
                self._io_ptr -= 1
            return True

    def owner(self, index: int) -> Claim | None:
        return self._claims[index]

    def claims(self) -> list[Claim | None]:
        with self._lock:
            return list(self._claims)


@dataclass(frozen=True)
class ChunkRecord:
    index: int
    side: str
    start_us: int
    finish_us: int
    nbytes: int


@dataclass
class RunReport:
    mode: str
    clock: str
    n_chunks: int
    records: list[ChunkRecord]
    events: list[tuple[int, str, str, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.records = sorted(self.records, key=lambda r: r.index)

    @property
    def ttft_us(self) -> int:
        return ttft(self)

    @property
    def merge_point(self) -> int:
        io_idx = [r.index for r in self.records if r.side == "io"]
        return min(io_idx) if io_idx else self.n_chunks

    @property
    def computed_fraction(self) -> float:
        return self.merge_point / self.n_chunks

    def busy_us(self, side: str) -> int:
        return sum(r.finish_us - r.start_us for r in self.records if r.side == side)

    def sides(self) -> list[str]:
        return [r.side for r in self.records]

    def coverage_ok(self) -> bool:
        return [r.index for r in self.records] == list(range(self.n_chunks))

    def summary(self) -> str:
        return (
            f"mode={self.mode} N={self.n_chunks} ttft_us={self.ttft_us} "
            f"merge_point={self.merge_point} computed_fraction={self.computed_fraction:.6f}"
        )

    def write_event_log(self, dest: str | Path | TextIO) -> None:
        if isinstance(dest, (str, Path)):
            with open(dest, "w", newline="") as fh:
                self.write_event_log(fh)
            return
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(EVENT_LOG_HEADER)
        for r in self.records:
            w.writerow((r.index, r.side, r.start_us, r.finish_us, r.nbytes))
        dest.write(
            f"# summary,{self.mode},{self.n_chunks},{self.ttft_us},{self.merge_point},"
            f"{self.computed_fraction:.6f}\n"
        )

    def event_log_text(self) -> str:
        buf = io.StringIO()
        self.write_event_log(buf)
        return buf.getvalue()


def ttft(report: RunReport) -> int:
    """Time from arrival (t = 0) until the last chunk is computed or resident."""
    return max((r.finish_us for r in report.records), default=0)


def oracle_best_split(
    per_chunk_compute: Sequence[float], per_chunk_fetch: Sequence[float]
) -> tuple[int, float]:
    """Best static split point by exhaustive search.

    Chunks ``[0, k)`` are computed serially, ``[k, N)`` fetched serially,
    both starting at t = 0.  Ties go to the smaller ``k``.
    """
    n = len(per_chunk_compute)
    if len(per_chunk_fetch) != n:
        raise ValueError("compute and fetch lists must have equal length")
    best_k, best = 0, None
    for k in range(n + 1):
        t = max(sum(per_chunk_compute[:k]), sum(per_chunk_fetch[k:]))
        if best is None or t < best:
            best_k, best = k, t
    return best_k, best


def one_chunk_slack(
    per_chunk_compute: Sequence[float], per_chunk_fetch: Sequence[float], merge_point: int
) -> float:
    """Greedy slack: the compute chunk(s) adjacent to the merge point or one fetch chunk."""
    n = len(per_chunk_compute)
    around = [per_chunk_compute[i] for i in (merge_point - 1, merge_point) if 0 <= i < n]
    return max(around + list(per_chunk_fetch) + [0])


@dataclass
class _Plan:
    request: RequestSpec
    chunks: list[ChunkSpec]
    keys: list[ChunkKey]
    tasks: list[FetchTask]
    kv_bytes: list[int]


def _plan(
    request: RequestSpec,
    profile: ModelProfile,
    codec: Codec,
    store: ChunkStore | None,
    keys: Sequence[ChunkKey] | None,
    seed: int,
) -> _Plan:
    chunks = request.chunks()
    if keys is None:
        keys = request_keys(request, seed)
    keys = list(keys)
    if len(keys) != len(chunks):
        raise ValueError(f"{len(keys)} keys for {len(chunks)} chunks")
    kv = [chunk_bytes(profile, c) for c in chunks]
    tasks = []
    for chunk, key, raw in zip(chunks, keys, kv):
        if store is not None:
            if not store.contains(key):
                raise MissingChunkError(f"chunk {chunk.index} ({key.hex}) is not in the store")
            meta = store.meta(key)
            if meta.codec != codec.id:
                raise RunAborted(f"chunk {chunk.index} stored as {meta.codec}, run expects {codec.id}")
            enc, raw = meta.encoded_bytes, meta.uncompressed_bytes
        else:
            enc = codec.encoded_size(raw)
        tasks.append(FetchTask(key, chunk, enc, raw))
    return _Plan(request, chunks, keys, tasks, kv)


def _spawn(clock: Clock, fn: Callable[[], None], name: str, errors: list[BaseException]) -> threading.Thread:
    def body() -> None:
        try:
            fn()
        except BaseException as exc:
            errors.append(exc)
        finally:
            clock.detach()

    clock.attach()
    t = threading.Thread(target=body, name=name, daemon=True)
    t.start()
    return t


def run(
    request: RequestSpec,
    profile: ModelProfile,
    cost_model: CostModel,
    trace: BandwidthTrace,
    codec: Codec | str = IDENTITY,
    mode: str = "cake",
    *,
    clock: str = "sim",
    store: ChunkStore | None = None,
    keys: Sequence[ChunkKey] | None = None,
    seed: int = 0,
    sides: Sequence[str] = SIDES,
    budget_per_step: int | None = None,
    quantum_bytes: int = DEFAULT_QUANTUM,
    decode_us_per_mib: float = 0.0,
    jitter_us: int = 0,
    jitter_seed: int | None = None,
) -> RunReport:
    """Acquire the KV cache of ``request`` and report per-chunk provenance.

    ``mode`` picks the strategy: ``cake`` (bidirectional), ``compute_only``
    or ``io_only``.  ``sides`` lets a cake run launch only one worker; with
    one side disabled the run must collapse to the matching baseline.

    In ``sim`` clock mode no store is needed; fetch sizes come from the
    codec's size law.  ``live`` mode reads real bytes from ``store``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not set(sides) <= set(SIDES) or not sides:
        raise ValueError(f"sides must be a non-empty subset of {SIDES}")
    if clock == "live" and store is None:
        raise ValueError("live runs need a populated chunk store")
    codec = get_codec(codec)
    plan = _plan(request, profile, codec, store, keys, seed)
    clk = make_clock(clock)
    budget = TokenBudget(budget_per_step or max(request.chunk_size, 512), request.power_fraction)

    events: list[tuple[int, str, str, int]] = []
    ev_lock = threading.Lock()

    def log(side: str) -> Callable[[str, int], None]:
        def emit(kind: str, index: int) -> None:
            with ev_lock:
                events.append((clk.now(), side, kind, index))

        return emit

    compute = ComputeEngine(
        cost_model, clk, budget, on_event=log("compute"), jitter_us=jitter_us,
        seed=None if jitter_seed is None else jitter_seed * 2,
    )
    table = ClaimTable(len(plan.chunks), clk)

    def io_claim(task: FetchTask) -> bool:
        won = table.claim("io", task.chunk.index, clk.now())
        log("io")("claim" if won else "claim_lost", task.chunk.index)
        return won

    def compute_claim(chunk: ChunkSpec) -> bool:
        won = table.claim("compute", chunk.index, clk.now())
        log("compute")("claim" if won else "claim_lost", chunk.index)
        return won

    use_claims = mode == "cake"
    fetch = TransferEngine(
        clk, trace, store, codec,
        quantum_bytes=quantum_bytes, decode_us_per_mib=decode_us_per_mib,
        claim=io_claim if use_claims else None, on_event=log("io"), jitter_us=jitter_us,
        seed=None if jitter_seed is None else jitter_seed * 2 + 1,
    )
    key_of = {c.index: k for c, k in zip(plan.chunks, plan.keys)}
    compute.is_available = lambda j: fetch.is_resident(key_of[j])

    run_compute = mode == "compute_only" or (mode == "cake" and "compute" in sides)
    run_io = mode == "io_only" or (mode == "cake" and "io" in sides)

    errors: list[BaseException] = []
    threads = []
    # Hold the virtual clock until both workers exist, else the first one
    # starts alone.
    clk.attach()
    if run_io:
        fetch.push_seq(reversed(plan.tasks))
    if run_compute:
        if use_claims:
            body = lambda: compute.run_forward(  # noqa: E731
                plan.chunks,
                resident_probe=lambda c: fetch.is_resident(key_of[c.index]),
                claim=compute_claim,
                on_stop=fetch.stop,
            )
        else:
            body = lambda: compute.run_forward(plan.chunks)  # noqa: E731
        threads.append(_spawn(clk, body, "cake-compute", errors))
    if run_io:
        fetch.start()
    clk.detach()
    for t in threads:
        t.join()
    fetch.join()
    if fetch.error is not None:
        errors.append(fetch.error)
    if errors:
        raise RunAborted(f"{mode} run aborted: {errors[0]}") from errors[0]

    records = [
        ChunkRecord(s.chunk.index, "compute", s.started_at, s.finished_at, plan.kv_bytes[s.chunk.index])
        for s in compute.steps
    ]
    records += [ChunkRecord(r.index, "io", r.start_us, r.finish_us, r.nbytes) for r in fetch.records]
    report = RunReport(mode, clock, len(plan.chunks), records, sorted(events, key=lambda e: e[0]))
    if not report.coverage_ok():
        raise RunAborted(
            f"{mode} run did not cover every chunk exactly once: {[r.index for r in report.records]}"
        )
    return report


def chunk_durations_us(
    request: RequestSpec,
    profile: ModelProfile,
    cost_model: CostModel,
    trace: BandwidthTrace,
    codec: Codec | str = IDENTITY,
) -> tuple[list[int], list[int]]:
    """Per-chunk compute and fetch durations (us) as the simulator charges them.

    Fetch durations assume a start at t = 0 and are exact only for static
    traces, which is all the oracle is defined for.
    """
    codec = get_codec(codec)
    chunks = request.chunks()
    comp = [to_us(compute_latency(cost_model, c, request.power_fraction)) for c in chunks]
    fetch = [to_us(fetch_latency(trace, codec.encoded_size(chunk_bytes(profile, c)), 0.0)) for c in chunks]
    return comp, fetch
