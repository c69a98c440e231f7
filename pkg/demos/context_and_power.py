"""
Longer prompts, weaker GPUs
===========================

Later chunks cost more to compute because each attends over a longer
prefix, while every chunk costs the same to fetch.  So the longer the
prompt, the larger the share the fetcher takes.  Throttling compute power
pushes the same way.
"""

import numpy as np

from cake_kv import BandwidthTrace, RequestSpec, run
from cake_kv.config import calibration_from, profile_from, read_ini

cp = read_ini()
profile, cal = profile_from(cp, "longalpaca-7b"), calibration_from(cp, "a100")
link = BandwidthTrace.constant(10000)

lengths = [2048, 4096, 8192, 16384, 32768]
fractions = np.array([run(RequestSpec(n, 512), profile, cal, link).computed_fraction for n in lengths])
for n, f in zip(lengths, fractions):
    print(f"{n:6d} tokens: computed {f:.3f}")
print(f"drop {100 * (fractions[0] - fractions[-1]):.1f} percentage points")

# %%
# TTFT against both baselines at 32k tokens over a 2 Gbit/s link
slow = BandwidthTrace.constant(2000)
for power in (1.0, 0.5, 0.1):
    request = RequestSpec(32768, 512, power_fraction=power)
    t = {m: run(request, profile, cal, slow, mode=m).ttft_us / 1e3
         for m in ("cake", "compute_only", "io_only")}
    print(f"power {power:.1f}: " + ", ".join(f"{m} {v:8.1f} ms" for m, v in t.items()))
