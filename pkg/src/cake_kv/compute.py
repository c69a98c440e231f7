"""Forward chunk-prefill worker.

No transformer runs here: a step "computes" a chunk by holding the clock
for the modeled latency.  GPU sharing is expressed as the request's share
of the per-step token budget, which divides step latency.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Iterable

from .clock import Clock
from .model import ChunkSpec, CostModel, compute_latency, to_us

PRIORITY_COMPUTE = 0


class PrefixDependencyError(RuntimeError):
    """A chunk was scheduled before every earlier chunk was available."""


@dataclass(frozen=True)
class TokenBudget:
    budget_per_step: int = 512
    share_for_request: float = 1.0

    def __post_init__(self) -> None:
        if self.budget_per_step < 1:
            raise ValueError("budget_per_step must be >= 1")
        if not 0 < self.share_for_request <= 1:
            raise ValueError("share_for_request must be in (0, 1]")

    @property
    def power_fraction(self) -> float:
        return self.share_for_request


@dataclass(frozen=True)
class PrefillStep:
    chunk: ChunkSpec
    power_fraction: float
    started_at: int
    finished_at: int

    @property
    def duration_us(self) -> int:
        return self.finished_at - self.started_at


class ComputeEngine:
    def __init__(
        self,
        cost_model: CostModel,
        clock: Clock,
        budget: TokenBudget | float = 1.0,
        *,
        is_available: Callable[[int], bool] | None = None,
        on_event: Callable[[str, int], None] | None = None,
        jitter_us: int = 0,
        seed: int | None = None,
    ) -> None:
        if not isinstance(budget, TokenBudget):
            budget = TokenBudget(share_for_request=budget)
        self.cost_model = cost_model
        self.clock = clock
        self.budget = budget
        self.is_available = is_available
        self.on_event = on_event
        self.jitter_us = jitter_us
        self.steps: list[PrefillStep] = []
        self._computed: set[int] = set()
        self._rng = random.Random(seed)

    @property
    def power_fraction(self) -> float:
        return self.budget.power_fraction

    def step_us(self, chunk: ChunkSpec) -> int:
        return to_us(compute_latency(self.cost_model, chunk, self.power_fraction))

    def prefill_chunk(self, chunk: ChunkSpec) -> PrefillStep:
        if chunk.token_count > self.budget.budget_per_step:
            raise ValueError(
                f"chunk of {chunk.token_count} tokens exceeds the {self.budget.budget_per_step}-token step budget"
            )
        missing = [
            j
            for j in range(chunk.index)
            if j not in self._computed and not (self.is_available and self.is_available(j))
        ]
        if missing:
            raise PrefixDependencyError(
                f"chunk {chunk.index} scheduled before chunks {missing[:5]} are available"
            )
        if self.jitter_us:
            self.clock.sleep(self._rng.randint(0, self.jitter_us), PRIORITY_COMPUTE)
        start = self.clock.now()
        if self.on_event:
            self.on_event("compute_start", chunk.index)
        self.clock.sleep_until(start + self.step_us(chunk), PRIORITY_COMPUTE)
        step = PrefillStep(chunk, self.power_fraction, start, self.clock.now())
        self._computed.add(chunk.index)
        self.steps.append(step)
        if self.on_event:
            self.on_event("compute_done", chunk.index)
        return step

    def run_forward(
        self,
        chunks: Iterable[ChunkSpec],
        resident_probe: Callable[[ChunkSpec], bool] | None = None,
        claim: Callable[[ChunkSpec], bool] | None = None,
        on_stop: Callable[[], None] | None = None,
    ) -> list[PrefillStep]:
        """Prefill chunks in ascending order until the next one is taken.

        Before every chunk: if it is already resident the fetch side got
        there first, so signal it to stop and return; otherwise try to claim
        it and return if the claim is lost.
        """
        steps = []
        self.clock.sleep_until(self.clock.now(), PRIORITY_COMPUTE)
        for chunk in sorted(chunks, key=lambda c: c.index):
            if resident_probe is not None and resident_probe(chunk):
                break
            if claim is not None and not claim(chunk):
                break
            steps.append(self.prefill_chunk(chunk))
        if on_stop is not None:
            on_stop()
        return steps
