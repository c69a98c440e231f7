"""
Bandwidth that changes mid-request
==================================

A static split chosen up front is wrong as soon as the link changes speed.
Here the shipped 7B profile loads a 32k-token prompt while the link drops
from 10 Gbit/s to 2 Gbit/s at 1.5 s and partly recovers later.
"""

from cake_kv import BandwidthTrace, RequestSpec, run
from cake_kv.config import calibration_from, profile_from, read_ini, trace_from

cp = read_ini()
profile = profile_from(cp, "longalpaca-7b")
cal = calibration_from(cp, "a100")
request = RequestSpec(32768, 512)

fluct = trace_from(cp, "fluctuating")
print("trace:", fluct.breakpoints)

# %%
for trace in (BandwidthTrace.constant(10000), fluct, BandwidthTrace.constant(2000)):
    r = run(request, profile, cal, trace)
    print(f"{trace.name:>10}: ttft {r.ttft_us / 1e3:8.1f} ms, merge at chunk {r.merge_point:2d}"
          f" of {r.n_chunks}, computed {r.computed_fraction:.2f}")

# %%
# When the chunks were taken, and by whom.  Fetches slow down after the
# collapse, so compute ends up owning more of the prompt than it would on
# the fast link.
r = run(request, profile, cal, fluct)
for rec in r.records[:: max(1, len(r.records) // 16)]:
    print(f"chunk {rec.index:2d} {rec.side:7s} {rec.start_us / 1e3:8.1f} -> {rec.finish_us / 1e3:8.1f} ms")
