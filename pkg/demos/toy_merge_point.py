"""
Where the two sides meet
========================

Four chunks of 512 tokens.  Computing chunk ``i`` costs 10, 20, 30, 40 ms
(each step attends over a longer prefix); fetching any chunk costs 25 ms.
Compute walks forward from chunk 0, the fetcher walks backward from chunk 3,
and whichever side reaches a chunk first owns it.
"""

import numpy as np

from cake_kv import BandwidthTrace, CostModel, ModelProfile, RequestSpec, oracle_best_split, run
from cake_kv.scheduler import chunk_durations_us

request = RequestSpec(4 * 512, 512)
profile = ModelProfile("toy", 1, 1, per_token_bytes_override=25_000)  # 12.8 MB per chunk
cost = CostModel(10.0, 10.0 / 512)
trace = BandwidthTrace.constant(4096)

comp, fetch = (np.array(d) / 1000 for d in chunk_durations_us(request, profile, cost, trace))
print("compute ms per chunk:", comp)
print("fetch ms per chunk:  ", fetch)

# %%
# Every static split k (compute 0..k-1, fetch k..3) and its TTFT
for k in range(len(comp) + 1):
    print(f"k={k}: max({comp[:k].sum():5.1f}, {fetch[k:].sum():5.1f}) = {max(comp[:k].sum(), fetch[k:].sum()):5.1f} ms")
k, best = oracle_best_split(comp, fetch)
print("best static split:", k, best, "ms")

# %%
# The scheduler finds the same point without being told the durations
report = run(request, profile, cost, trace)
print(report.summary())
print("sides:", report.sides())

for mode in ("compute_only", "io_only"):
    print(mode, run(request, profile, cost, trace, mode=mode).ttft_us / 1000, "ms")

# %%
# The event log is what `cake-bench bench --verbose` writes per run
print(report.event_log_text())
