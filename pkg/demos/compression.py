"""
Shrinking what goes over the wire
=================================

A codec changes the bytes each fetch moves.  ``quant8`` really encodes
fp16 KV payloads into 8-bit blocks; ``factor(x)`` only declares a ratio,
which is how a learned codec is modelled in simulation.
"""

import numpy as np

from cake_kv import QUANT8, BandwidthTrace, RequestSpec, get_codec, run
from cake_kv.config import calibration_from, profile_from, read_ini
from cake_kv.store import synth_payload

raw = synth_payload(4 * 2**20, seed=0, index=0)
enc = QUANT8.encode(raw)
print(f"quant8: {len(raw)} -> {len(enc)} bytes ({len(enc) / len(raw):.4f})")

x = np.frombuffer(raw, dtype=np.float16).astype(np.float64)
y = np.frombuffer(QUANT8.decode(enc, len(raw)), dtype=np.float16).astype(np.float64)
print(f"max abs error {np.abs(x - y).max():.4g}, value range {x.max() - x.min():.4g}")

# %%
# In simulation, a codec with ratio r is the same as an r-times faster link.
cp = read_ini()
profile, cal = profile_from(cp, "longalpaca-7b"), calibration_from(cp, "a100")
request = RequestSpec(14000, 512)
link = BandwidthTrace.constant(2000)
for codec in ("identity", "quant8", "factor(8.6)"):
    r = run(request, profile, cal, link, codec, mode="io_only")
    print(f"{codec:>12}: io_only ttft {r.ttft_us / 1e3:8.1f} ms")
print(f"{'x8.6 link':>12}: io_only ttft {run(request, profile, cal, link.scaled(8.6), mode='io_only').ttft_us / 1e3:8.1f} ms")

# %%
# Cheaper fetches push the merge point toward the front of the prompt
for codec in ("identity", "quant8", "factor(8.6)"):
    r = run(request, profile, cal, link, get_codec(codec))
    print(f"{codec:>12}: cake ttft {r.ttft_us / 1e3:8.1f} ms, computed {r.computed_fraction:.2f}")
