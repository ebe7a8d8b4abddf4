"""
Where quantization error comes from when sink tokens are in the mix
===================================================================

Sink rows have distinctive value ranges, so any group or calibration that
includes them inflates the quantization step for everyone else. The error
decomposition splits the mean squared error by sink membership and shows the
cure: exclude the sinks and keep them at full precision.
"""

import numpy as np

from sinkquant import CalibrationSet, QuantSpec, error_decomposition
from sinkquant.analysis import rows_to_csv_text
from sinkquant.sinks import SinkSet

rng = np.random.default_rng(5)
tokens, hidden = 256, 512
x = rng.normal(size=(tokens, hidden))
sinks = SinkSet.of([0, 14])
for s in sinks:
    x[s] *= 1000.0  # planted sink rows, ~1000x the background

specs = [
    QuantSpec(bits, axis, mode, group_size=16)
    for mode in ("dynamic", "static")
    for axis in ("per_token", "per_channel")
    for bits in (4, 3, 2)
]
cal = CalibrationSet([x], sinks=[sinks])
report = error_decomposition(x, sinks, specs, cal=cal)

print("values x100, per-group MSE split by sink membership\n")
header = f"{'axis':>12} {'mode':>8} {'bits':>4} {'overall':>12} {'w/o sinks':>12} {'w/ sinks':>12} {'excluded':>12}"
print(header)
for row in report.rows:
    fmt = lambda v: f"{100 * v:12.4f}" if v is not None else f"{'-':>12}"
    print(
        f"{row.axis:>12} {row.mode:>8} {row.bits:>4}"
        f" {fmt(row.overall)} {fmt(row.wo_sink_groups)} {fmt(row.w_sink_groups)} {fmt(row.excluded)}"
    )

print(
    """
Reading the table:
 * dynamic per-token: each token owns its groups, so the sink rows cannot
   hurt anyone else - the w/o-sink column matches a plant-free run exactly;
 * dynamic per-channel: groups mix tokens, so the groups containing a sink
   carry visibly more error than the rest;
 * static rows: one calibration serves all tokens, so the sinks inflate
   every group's range - excluding them ("excluded" column) collapses the
   error, which is exactly why the cache keeps sink rows at full precision.
"""
)

# Reports also emit as tidy CSV for plotting.
print(rows_to_csv_text([r.to_json_dict(display_scale=100.0) for r in report.rows])[:240], "...")
