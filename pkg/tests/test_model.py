import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cake_kv.model import (
    BandwidthTrace,
    ChunkSpec,
    CostModel,
    ModelProfile,
    RequestSpec,
    chunk_bytes,
    compute_latency,
    fetch_latency,
    kv_bytes_per_token,
    split_into_chunks,
    to_us,
)

P7B = ModelProfile("longalpaca-7b", 32, 4096, 2, 2)
P13B = ModelProfile("longalpaca-13b", 40, 5120, 2, 2)
MiB = 1 << 20


def integrate_fetch(trace, nbytes, start=0.0, dt=0.1):
    """Brute-force oracle: march time in dt steps until the bits are delivered."""
    need, got, t = nbytes * 8, 0.0, start
    while got < need:
        got += trace.rate_at(t) * 1000.0 * dt
        t += dt
    return t - start


# -- kv bytes --------------------------------------------------------------

def test_kv_bytes_7b_matches_half_megabyte():
    assert kv_bytes_per_token(P7B) == 524_288
    assert kv_bytes_per_token(P7B) / MiB == pytest.approx(0.5)


def test_kv_bytes_13b_matches_078_megabytes():
    assert kv_bytes_per_token(P13B) == 819_200
    assert kv_bytes_per_token(P13B) / MiB == pytest.approx(0.78, abs=0.005)


def test_kv_bytes_override():
    p = ModelProfile("x", 1, 1, per_token_bytes_override=1000)
    assert kv_bytes_per_token(p) == 1000


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_layers=0, hidden_size=1), dict(n_layers=1, hidden_size=0),
     dict(n_layers=1, hidden_size=1, precision_bytes=3)],
)
def test_profile_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        ModelProfile("bad", **kwargs)


@pytest.mark.parametrize(
    "profile, chunk, expected",
    [
        (P7B, ChunkSpec(0, 0, 512), 268_435_456),
        (P7B, ChunkSpec(0, 0, 1), 524_288),
        (P13B, ChunkSpec(2, 1024, 476), 389_939_200),
    ],
)
def test_chunk_bytes(profile, chunk, expected):
    assert chunk_bytes(profile, chunk) == expected


# -- chunking --------------------------------------------------------------

def test_split_examples():
    assert split_into_chunks(1500, 512) == [
        ChunkSpec(0, 0, 512), ChunkSpec(1, 512, 512), ChunkSpec(2, 1024, 476)
    ]
    assert split_into_chunks(512, 512) == [ChunkSpec(0, 0, 512)]
    chunks = split_into_chunks(32768, 512)
    assert len(chunks) == 64 and all(c.token_count == 512 for c in chunks)


def test_split_rejects_empty():
    with pytest.raises(ValueError):
        split_into_chunks(0, 512)


@given(st.integers(1, 5000), st.integers(1, 700))
def test_split_tiles_exactly(total, size):
    chunks = split_into_chunks(total, size)
    assert len(chunks) == math.ceil(total / size)
    covered = [t for c in chunks for t in range(c.token_start, c.token_end)]
    assert covered == list(range(total))
    assert [c.index for c in chunks] == list(range(len(chunks)))
    assert all(c.token_count == size for c in chunks[:-1])
    assert 1 <= chunks[-1].token_count <= size


def test_request_spec_validation():
    with pytest.raises(ValueError):
        RequestSpec(100, 200)
    with pytest.raises(ValueError):
        RequestSpec(100, 10, power_fraction=0)
    assert RequestSpec(1500, 512).n_chunks == 3


# -- compute latency -------------------------------------------------------

CM = CostModel(alpha_ms=10, beta_ms_per_token=0.01, reference_chunk_size=512)


def test_compute_latency_examples():
    assert compute_latency(CM, ChunkSpec(0, 0, 512), 1.0) == pytest.approx(10.0)
    # hand computation: 10 + 0.01 * 1024 = 20.24
    assert compute_latency(CM, ChunkSpec(2, 1024, 512), 1.0) == pytest.approx(20.24)
    assert compute_latency(CM, ChunkSpec(2, 1024, 512), 0.5) == pytest.approx(40.48)
    assert to_us(compute_latency(CM, ChunkSpec(2, 1024, 512), 1.0)) == 20240


def test_compute_latency_rejects_bad_power():
    with pytest.raises(ValueError):
        compute_latency(CM, ChunkSpec(0, 0, 512), 0.0)


@given(
    st.floats(0, 100), st.floats(0, 0.1), st.integers(0, 60), st.integers(1, 60),
    st.floats(0.01, 1.0),
)
def test_compute_monotone_and_power_scaling(alpha, beta, i, j, p):
    m = CostModel(alpha, beta)
    a, b = sorted((i, j))
    ca = compute_latency(m, ChunkSpec(a, a * 512, 512), p)
    cb = compute_latency(m, ChunkSpec(b, b * 512, 512), p)
    assert ca <= cb + 1e-9
    full = compute_latency(m, ChunkSpec(b, b * 512, 512), 1.0)
    assert cb * p == pytest.approx(full, rel=1e-9, abs=1e-12)


# -- fetch latency ---------------------------------------------------------

def test_fetch_constant_examples():
    assert fetch_latency(BandwidthTrace.constant(2000), 256 * MiB) == pytest.approx(1073.74, abs=0.005)
    assert fetch_latency(BandwidthTrace.constant(10000), 256 * MiB) == pytest.approx(214.75, abs=0.005)
    assert fetch_latency(BandwidthTrace.constant(10000), 0) == 0.0


TWO_STEP = BandwidthTrace(((0, 1000), (1000, 4000)))


@pytest.mark.parametrize(
    "nbytes, start, expected",
    [
        # frozen from integrate_fetch at 0.1 ms resolution
        (250_000_000, 0.0, 1250.0),
        (140_625_000, 0.0, 1031.25),
        (140_625_000, 500.0, 656.25),
        (31_250_000, 0.0, 250.0),
        (140_625_000, 2000.0, 281.25),
    ],
)
def test_fetch_piecewise(nbytes, start, expected):
    assert fetch_latency(TWO_STEP, nbytes, start) == pytest.approx(expected, abs=1e-9)
    assert integrate_fetch(TWO_STEP, nbytes, start) == pytest.approx(expected, abs=0.1)


def test_fetch_halving_mid_chunk():
    trace = BandwidthTrace(((0, 10000), (100, 5000)))
    got = fetch_latency(trace, 256 * MiB)
    assert got == pytest.approx(329.4967, abs=1e-3)
    assert integrate_fetch(trace, 256 * MiB) == pytest.approx(got, abs=0.1)


@given(
    st.lists(st.tuples(st.floats(1, 500), st.floats(50, 20000)), min_size=0, max_size=4),
    st.floats(100, 20000),
    st.integers(1, 20_000_000),
    st.floats(0, 1500),
)
def test_fetch_matches_integral(steps, first_rate, nbytes, start):
    bps, t = [(0.0, first_rate)], 0.0
    for dt, r in steps:
        t += dt
        bps.append((t, r))
    trace = BandwidthTrace(tuple(bps))
    d = fetch_latency(trace, nbytes, start)
    # absolute times lose ulps when start >> d; allow that much slop
    slop = max(r for _, r in bps) * 1000.0 * (start + d) * 1e-13
    assert trace.bits_between(start, start + d) == pytest.approx(nbytes * 8, rel=1e-9, abs=slop)
    # smallest such d: a hair earlier is not enough
    if d > 1e-3:
        assert trace.bits_between(start, start + d * (1 - 1e-6)) < nbytes * 8


@given(st.integers(0, 10**9), st.integers(0, 10**9), st.floats(1, 40000), st.floats(0, 10**5))
def test_fetch_position_independent_and_additive(a, b, mbps, start):
    trace = BandwidthTrace.constant(mbps)
    assert fetch_latency(trace, a, start) == pytest.approx(
        fetch_latency(trace, a, 0.0), rel=1e-9, abs=start * 1e-12
    )
    total = fetch_latency(trace, a + b)
    assert total == pytest.approx(fetch_latency(trace, a) + fetch_latency(trace, b), rel=1e-9, abs=1e-9)


def test_trace_validation(tmp_path):
    with pytest.raises(ValueError):
        BandwidthTrace(((5, 1000),))
    with pytest.raises(ValueError):
        BandwidthTrace(((0, 1000), (0, 2000)))
    with pytest.raises(ValueError):
        BandwidthTrace(((0, 0),))
    csv_path = tmp_path / "trace.csv"
    csv_path.write_text("time_ms,mbps\n0,1000\n1000,4000\n")
    loaded = BandwidthTrace.from_csv(csv_path)
    assert loaded.breakpoints == TWO_STEP.breakpoints
    assert loaded.name == "trace"
    assert BandwidthTrace.constant(2000).is_static
    assert loaded.scaled(2).rate_at(1500) == 8000
