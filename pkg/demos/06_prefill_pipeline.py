"""
The full prefill pipeline: detect sinks, preserve them, quantize the rest
=========================================================================

Layer by layer, the prefill pass quantizes each layer's K/V before attention
reads them back, so quantization error propagates exactly as it would at
inference. After the emergence layer's output is computed, the sink
predictor picks the tokens to preserve; every later layer stores those rows
at full precision in the cache's sink region.
"""

import numpy as np

from sinkquant import (
    DecoderConfig,
    decoder_forward,
    footprint_megabytes,
    prefill_with_kvsink,
    synthesize_sink_model,
)
from sinkquant.sinks import SinkProfile

cfg = DecoderConfig(num_layers=8, hidden=128, heads=4, ffn_hidden=256, seed=3)
plant = [(0, 77, 2000.0), (14, 77, -1800.0)]
weights, hooks = synthesize_sink_model(cfg, plant, l_emerge=1, l_dissipate=6)
profile = SinkProfile("demo", cfg.num_layers, 1, cfg.hidden, (77,))
h0 = np.random.default_rng(4).normal(size=(32, cfg.hidden))

# Full-precision baseline for comparison.
h_fp, _ = decoder_forward(h0, weights, cfg, hooks=hooks)

common = dict(scheme="pt_kv_static", bits=2, group_size=16, k=5, hooks=hooks)
results = {}
for mode in ("none", "pfn", "kvsink"):
    h_q, cache, preserved = prefill_with_kvsink(h0, weights, cfg, profile, mode=mode, **common)
    results[mode] = (np.linalg.norm(h_q - h_fp), preserved, cache)

print("final-hidden-state drift vs the full-precision pass (2-bit static cache):\n")
for mode, (drift, preserved, _) in results.items():
    label = {"none": "no preservation", "pfn": "preserve first 5", "kvsink": "predicted sinks"}[mode]
    print(f"  {label:>17}: ||H - H_fp|| = {drift:9.3f}   preserved tokens: {list(preserved)}")

print(
    "\nThe planted sink at token 14 sits outside the first-N window, so the"
    "\nfirst-N cache quantizes it and the damage spreads through calibration;"
    "\nthe predictor preserves exactly {0, 14} and most of the drift vanishes."
)

# The cache accounts for its storage exactly: packed codes, full-precision
# sink rows (16-bit), parameters, and isolated outliers.
cache = results["kvsink"][2]
footprint = cache.memory_footprint()
print("\ncache footprint:", footprint)
print("in MB:", {k: round(v, 4) for k, v in footprint_megabytes(footprint).items()})

# Every layer after the emergence layer holds the detected rows verbatim.
for layer in (0, 1, 2, cfg.num_layers - 1):
    print(f"layer {layer}: sink region holds tokens {cache.sink_indices(layer)}")
