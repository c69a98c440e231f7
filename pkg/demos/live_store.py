"""
Reading real chunks from disk
=============================

Live mode runs the same scheduler on the wall clock.  The fetcher reads
encoded chunks from an on-disk store in slices and a throttle keeps the
delivered rate on the bandwidth trace.  Keys are chained hashes of the
token prefix, so prompts that share a prefix share chunks.
"""

import tempfile

from cake_kv import BandwidthTrace, ChunkStore, CostModel, ModelProfile, RequestSpec, populate, run
from cake_kv.store import request_keys

profile = ModelProfile("small", 1, 8, per_token_bytes_override=2048)
short, long = RequestSpec(2048, 256), RequestSpec(4096, 256)

with tempfile.TemporaryDirectory() as root:
    store = ChunkStore(root)
    populate(store, long, profile, seed=7, codec="quant8")
    before = store.total_encoded_bytes()
    # the short prompt is a prefix of the long one: nothing new to write
    populate(store, short, profile, seed=7, codec="quant8")
    print("bytes in store:", before, "->", store.total_encoded_bytes())
    print("shared keys:", sum(a == b for a, b in zip(request_keys(short, 7), request_keys(long, 7))))

    # %%
    cost = CostModel(4.0, 0.001, reference_chunk_size=256)
    trace = BandwidthTrace.constant(200)
    sim = run(long, profile, cost, trace, "quant8", seed=7)
    live = run(long, profile, cost, trace, "quant8", store=store, clock="live", seed=7,
               quantum_bytes=64 * 1024)
    for r in (sim, live):
        print(f"{r.clock:>4}: ttft {r.ttft_us / 1e3:7.1f} ms, merge at {r.merge_point}/{r.n_chunks}, "
              f"every chunk once: {r.coverage_ok()}")
