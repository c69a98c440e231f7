import pytest
from hypothesis import given
from hypothesis import strategies as st

from cake_kv.clock import VirtualClock
from cake_kv.compute import ComputeEngine, PrefixDependencyError, TokenBudget
from cake_kv.model import ChunkSpec, CostModel, compute_latency, split_into_chunks, to_us

CM = CostModel(10, 0.01)


def engine(power=1.0, **kw):
    clk = VirtualClock()
    clk.attach()  # the test thread drives the engine directly
    return ComputeEngine(CM, clk, TokenBudget(512, power), **kw)


def test_first_step_is_alpha():
    step = engine().prefill_chunk(ChunkSpec(0, 0, 512))
    assert (step.started_at, step.finished_at) == (0, 10_000)


def test_64_chunks_quadratic_total():
    eng = engine()
    steps = eng.run_forward(split_into_chunks(64 * 512, 512))
    assert [s.chunk.index for s in steps] == list(range(64))
    # closed form: sum of (10 + 0.01 * 512 * i) ms for i < 64
    assert steps[-1].finished_at == 10_961_920
    assert all(s.duration_us == 10_000 + 5_120 * s.chunk.index for s in steps)


def test_power_tenth_is_ten_times_slower():
    chunk = ChunkSpec(3, 1536, 512)
    assert engine(0.1).step_us(chunk) == 10 * engine(1.0).step_us(chunk)


def test_prefix_dependency_fault():
    eng = engine()
    with pytest.raises(PrefixDependencyError):
        eng.prefill_chunk(ChunkSpec(2, 1024, 512))
    ok = engine(is_available=lambda j: j < 2)
    assert ok.prefill_chunk(ChunkSpec(2, 1024, 512)).chunk.index == 2


def test_budget_bounds_chunk_size():
    clk = VirtualClock()
    eng = ComputeEngine(CM, clk, TokenBudget(256))
    with pytest.raises(ValueError):
        eng.prefill_chunk(ChunkSpec(0, 0, 512))
    with pytest.raises(ValueError):
        TokenBudget(512, 0.0)


def test_run_forward_stops_at_resident_or_lost_claim():
    stopped = []
    eng = engine()
    chunks = split_into_chunks(8 * 512, 512)
    steps = eng.run_forward(chunks, resident_probe=lambda c: c.index >= 5, on_stop=lambda: stopped.append(1))
    assert [s.chunk.index for s in steps] == [0, 1, 2, 3, 4] and stopped == [1]
    eng2 = engine()
    steps = eng2.run_forward(chunks, claim=lambda c: c.index < 3)
    assert [s.chunk.index for s in steps] == [0, 1, 2]


@given(
    st.floats(0, 200), st.floats(0, 0.05), st.integers(1, 20), st.integers(1, 512),
    st.floats(0.05, 1.0),
)
def test_step_law_exact_in_sim(alpha, beta, n, size, power):
    model = CostModel(alpha, beta)
    clk = VirtualClock()
    clk.attach()
    eng = ComputeEngine(model, clk, TokenBudget(512, power))
    steps = eng.run_forward(split_into_chunks(n * size, size))
    t = 0
    for s in steps:
        assert s.started_at == t
        assert s.duration_us == to_us(compute_latency(model, s.chunk, power))
        t = s.finished_at
    assert [s.chunk.index for s in steps] == list(range(n))
