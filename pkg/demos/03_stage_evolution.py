"""
The life cycle of stable outliers across decoder layers
=======================================================

Stable outliers march through five stages: nothing (initial), a burst out of
the FFN down-projection that lodges in the residual stream (emergence), a
long quiet ride in the residuals (stabilization), an equal-and-opposite
down-projection burst that cancels them (dissipation), and nothing again
(final). This demo plants that life cycle in the toy decoder and recovers it
from activation dumps alone.
"""

import numpy as np

from sinkquant import DecoderConfig, classify_stages, decoder_forward, synthesize_sink_model
from sinkquant.sinks import SinkProfile

cfg = DecoderConfig(num_layers=10, hidden=128, heads=4, ffn_hidden=256, seed=42)

# Plant outliers of ~2000 at (token 0, channel 77) and (token 14, channel 77),
# emerging at layer 2 and dissipating at layer 8.
plant = [(0, 77, 2000.0), (14, 77, -1800.0)]
weights, hooks = synthesize_sink_model(cfg, plant, l_emerge=2, l_dissipate=8)

h0 = np.random.default_rng(1).normal(size=(32, cfg.hidden))
_, dumps = decoder_forward(h0, weights, cfg, hooks=hooks, capture=("H", "H_prime", "X_d_in", "X_d_out"))

series = [
    {kind: dumps[kind][layer] for kind in ("X_d_in", "X_d_out", "H_prime", "H")}
    for layer in range(cfg.num_layers)
]
profile = SinkProfile("demo", cfg.num_layers, 2, cfg.hidden, (77,))
report = classify_stages(series, profile, ratio=100.0)

print(f"threshold = {report.threshold:.2f} (100x the off-channel median magnitude)\n")
print(f"{'layer':>5}  {'|X_d_out|':>10}  {'|H_prime|':>10}  {'|H|':>10}  stage")
for row in report.rows:
    print(
        f"{row.layer:>5}  {row.max_abs_down_out:>10.1f}  {row.max_abs_post_attn:>10.1f}"
        f"  {row.max_abs_hidden:>10.1f}  {row.stage}"
    )

print("\nemergence layers:  ", report.emergence_layers)
print("dissipation layers:", report.dissipation_layers)
if report.warnings:
    print("warnings:", report.warnings)

# The detection window is the emergence layer: that is where (and only
# where) the sink predictor needs to look, once per sequence.
