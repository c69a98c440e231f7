"""Domain types and analytic cost functions.

Every duration returned by the public cost functions is in milliseconds
(float), matching the units people quote for step times and traces.  The
schedulers convert to integer microseconds with :func:`to_us` so that the
virtual clock never accumulates float error.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

__all__ = [
    "ModelProfile",
    "RequestSpec",
    "ChunkSpec",
    "CostModel",
    "BandwidthTrace",
    "kv_bytes_per_token",
    "chunk_bytes",
    "split_into_chunks",
    "compute_latency",
    "fetch_latency",
    "to_us",
]

_US_SLOP = 1e-6


def to_us(ms: float) -> int:
    """Round a millisecond duration up to whole microseconds.

    A tiny slop absorbs float noise so that e.g. 20.24 ms maps to 20240 us
    rather than 20241.
    """
    if ms <= 0:
        return 0
    return max(0, math.ceil(ms * 1000.0 - _US_SLOP))


@dataclass(frozen=True)
class ModelProfile:
    name: str
    n_layers: int
    hidden_size: int
    precision_bytes: int = 2
    kv_multiplier: int = 2
    per_token_bytes_override: int | None = None

    def __post_init__(self) -> None:
        if self.n_layers < 1 or self.hidden_size < 1:
            raise ValueError(f"{self.name}: n_layers and hidden_size must be >= 1")
        if self.precision_bytes not in (1, 2, 4):
            raise ValueError(f"{self.name}: precision_bytes must be 1, 2 or 4")
        if self.kv_multiplier < 1:
            raise ValueError(f"{self.name}: kv_multiplier must be >= 1")
        if self.per_token_bytes_override is not None and self.per_token_bytes_override < 1:
            raise ValueError(f"{self.name}: per_token_bytes_override must be >= 1")


@dataclass(frozen=True)
class RequestSpec:
    total_tokens: int
    chunk_size: int = 512
    batch_size: int = 1
    power_fraction: float = 1.0

    def __post_init__(self) -> None:
        if not 1 <= self.chunk_size <= self.total_tokens:
            raise ValueError(
                f"need 1 <= chunk_size <= total_tokens, got {self.chunk_size}, {self.total_tokens}"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.power_fraction <= 1:
            raise ValueError(f"power_fraction must be in (0, 1], got {self.power_fraction}")

    @property
    def n_chunks(self) -> int:
        return -(-self.total_tokens // self.chunk_size)

    def chunks(self) -> list[ChunkSpec]:
        return split_into_chunks(self.total_tokens, self.chunk_size)


@dataclass(frozen=True, order=True)
class ChunkSpec:
    index: int
    token_start: int
    token_count: int

    @property
    def token_end(self) -> int:
        return self.token_start + self.token_count


@dataclass(frozen=True)
class CostModel:
    """Affine per-chunk compute cost: ``alpha + beta * token_start``.

    ``alpha_ms`` absorbs the fixed per-step overhead (batching, kernel
    launch); ``beta_ms_per_token`` is the attention-over-prefix slope.
    Both are quoted for a chunk of ``reference_chunk_size`` tokens.
    """

    alpha_ms: float
    beta_ms_per_token: float
    reference_chunk_size: int = 512
    name: str = "custom"

    def __post_init__(self) -> None:
        if self.alpha_ms < 0 or self.beta_ms_per_token < 0:
            raise ValueError("alpha_ms and beta_ms_per_token must be >= 0")
        if self.reference_chunk_size < 1:
            raise ValueError("reference_chunk_size must be >= 1")


@dataclass(frozen=True)
class BandwidthTrace:
    """Piecewise-constant throughput in megabits per second.

    ``breakpoints`` holds ``(t_ms, mbps)`` pairs; each rate holds from its
    time until the next breakpoint, the last one forever.
    """

    breakpoints: tuple[tuple[float, float], ...]
    name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        bps = tuple((float(t), float(r)) for t, r in self.breakpoints)
        if not bps:
            raise ValueError("trace needs at least one breakpoint")
        if bps[0][0] != 0.0:
            raise ValueError("first breakpoint must be at t = 0")
        for (t0, _), (t1, _) in zip(bps, bps[1:]):
            if t1 <= t0:
                raise ValueError("breakpoint times must be strictly increasing")
        if any(r <= 0 or not math.isfinite(r) for _, r in bps):
            raise ValueError("all bandwidths must be finite and > 0")
        object.__setattr__(self, "breakpoints", bps)
        if not self.name:
            label = f"{bps[0][1]:g}mbps" if len(bps) == 1 else f"trace{len(bps)}"
            object.__setattr__(self, "name", label)

    @classmethod
    def constant(cls, mbps: float) -> BandwidthTrace:
        return cls(((0.0, mbps),))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, float]], name: str = "") -> BandwidthTrace:
        return cls(tuple(pairs), name=name)

    @classmethod
    def from_csv(cls, path: str | Path) -> BandwidthTrace:
        """Load a two-column ``time_ms,mbps`` CSV; a header row is optional."""
        path = Path(path)
        pairs = []
        with path.open(newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    pairs.append((float(row[0]), float(row[1])))
                except ValueError:
                    if pairs:
                        raise
                    continue  # header
        return cls(tuple(pairs), name=path.stem)

    @property
    def is_static(self) -> bool:
        return len(self.breakpoints) == 1

    def scaled(self, factor: float) -> BandwidthTrace:
        return BandwidthTrace(
            tuple((t, r * factor) for t, r in self.breakpoints), name=f"{self.name}x{factor:g}"
        )

    def rate_at(self, t_ms: float) -> float:
        """Bandwidth in mbps at time ``t_ms``."""
        times = [t for t, _ in self.breakpoints]
        i = max(0, bisect.bisect_right(times, t_ms) - 1)
        return self.breakpoints[i][1]

    def bits_between(self, t0_ms: float, t1_ms: float) -> float:
        """Integral of the trace over ``[t0_ms, t1_ms]`` in bits."""
        if t1_ms <= t0_ms:
            return 0.0
        total = 0.0
        bps = self.breakpoints
        for i, (t, rate) in enumerate(bps):
            seg_end = bps[i + 1][0] if i + 1 < len(bps) else math.inf
            lo, hi = max(t, t0_ms), min(seg_end, t1_ms)
            if hi > lo:
                total += (hi - lo) * rate * 1000.0
        return total


def kv_bytes_per_token(profile: ModelProfile) -> int:
    if profile.per_token_bytes_override is not None:
        return profile.per_token_bytes_override
    return profile.kv_multiplier * profile.n_layers * profile.hidden_size * profile.precision_bytes


def chunk_bytes(profile: ModelProfile, chunk: ChunkSpec) -> int:
    return kv_bytes_per_token(profile) * chunk.token_count


def split_into_chunks(total_tokens: int, chunk_size: int) -> list[ChunkSpec]:
    if total_tokens < 1:
        raise ValueError("total_tokens must be >= 1")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    return [
        ChunkSpec(i, start, min(chunk_size, total_tokens - start))
        for i, start in enumerate(range(0, total_tokens, chunk_size))
    ]


def compute_latency(model: CostModel, chunk: ChunkSpec, power_fraction: float = 1.0) -> float:
    """Prefill latency of one chunk in ms.

    Linear in the number of preceding tokens, proportional to the chunk's
    own length, and inversely proportional to the share of the GPU token
    budget the request receives.
    """
    if not 0 < power_fraction <= 1:
        raise ValueError(f"power_fraction must be in (0, 1], got {power_fraction}")
    per_ref = model.alpha_ms + model.beta_ms_per_token * chunk.token_start
    return per_ref * (chunk.token_count / model.reference_chunk_size) / power_fraction


def fetch_latency(trace: BandwidthTrace, nbytes: int, start_time: float = 0.0) -> float:
    """Time in ms to move ``nbytes`` starting at ``start_time`` (ms) under ``trace``.

    Exact across breakpoints: walks the piecewise-constant segments until
    the integrated bits reach ``8 * nbytes``.
    """
    if nbytes < 0:
        raise ValueError("nbytes must be >= 0")
    remaining = nbytes * 8.0
    if remaining == 0:
        return 0.0
    bps = trace.breakpoints
    times = [t for t, _ in bps]
    i = max(0, bisect.bisect_right(times, start_time) - 1)
    t = float(start_time)
    while True:
        rate = bps[i][1] * 1000.0  # bits per ms
        seg_end = bps[i + 1][0] if i + 1 < len(bps) else math.inf
        capacity = (seg_end - t) * rate
        if remaining <= capacity:
            return t + remaining / rate - start_time
        remaining -= capacity
        t = seg_end
        i += 1

