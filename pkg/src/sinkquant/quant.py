"""Group-wise asymmetric integer quantization.

The scheme is classic asymmetric round-to-nearest integer quantization:

    code  = clamp(round(x / scale) + zero, 0, 2**bits - 1)
    x'    = scale * (code - zero)
    scale = (cmax - cmin) / (2**bits - 1)
    zero  = -round(cmin / scale)

with round-half-to-even everywhere, ``cmin``/``cmax`` the (optionally
tail-clipped) group extrema, and an unclamped integer zero point. Groups with
zero value range are marked degenerate; their constant is stored and
reproduced exactly instead of running the code arithmetic.

Group layouts, all with a configurable ``group_size`` and a shorter final
segment when the grouped axis does not divide evenly:

======================  ====================================================
axis / mode             one (scale, zero) pair per
======================  ====================================================
per_token   dynamic     (token row, channel segment)
per_token   static      channel segment, shared by all tokens
per_channel dynamic     (channel column, token segment)
per_channel static      channel column, shared by all tokens
per_tensor  (any)       whole tensor
======================  ====================================================

Static parameters are calibrated once (global min-max over the calibration
samples) and frozen, so they depend only on the tensor width and can be
reused for any number of tokens.

Dense-and-sparse isolation (``sparse_fraction`` > 0) removes the top
``round(f * len(vector))`` entries by magnitude from every vector (token rows
for per-token and per-tensor layouts, channel columns for per-channel),
stores them at full precision, and computes parameters on the remainder.
Token rows listed in an exclusion set contribute to no group statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundsError,
    CalibrationError,
    ConfigError,
    LayoutError,
    ShapeError,
)
from .packing import pack_codes, unpack_codes
from .tensors import as_tensor

AXES = ("per_token", "per_channel", "per_tensor")
MODES = ("dynamic", "static")


@dataclass(frozen=True)
class QuantSpec:
    """Configuration of one quantization scheme."""

    bits: int
    axis: str = "per_token"
    mode: str = "dynamic"
    group_size: int = 16
    clip: float | None = None
    sparse_fraction: float = 0.0

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ConfigError(f"bits must be in [2, 8], got {self.bits}")
        if self.axis not in AXES:
            raise ConfigError(f"unknown axis {self.axis!r}", allowed=list(AXES))
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}", allowed=list(MODES))
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.clip is not None and not 0.0 <= self.clip < 0.5:
            raise ConfigError(f"clip must be in [0, 0.5), got {self.clip}")
        if not 0.0 <= self.sparse_fraction <= 1.0:
            raise ConfigError(f"sparse_fraction must be in [0, 1], got {self.sparse_fraction}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def lossless(self) -> bool:
        """True when every entry is isolated at full precision."""
        return self.sparse_fraction >= 1.0


def _canonical(x, name="input") -> np.ndarray:
    """Validate and reshape to 2-D [tokens, channels]; 1-D is one token row."""
    arr = as_tensor(x, name=name)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def _segments(length: int, gs: int) -> int:
    return -(-length // gs) if length else 0


class GroupLayout:
    """Maps every position of an [n, d] tensor to its quantization group.

    Group ids are dense integers; ``grouping_order`` gives the stable
    permutation that makes the flattened tensor group-major (the packed-code
    ordering: ascending group id, row-major within a group).
    """

    def __init__(self, shape: tuple[int, int], axis: str, mode: str, group_size: int):
        self.shape = (int(shape[0]), int(shape[1]))
        self.axis = axis
        self.mode = mode
        self.group_size = int(group_size)
        n, d = self.shape
        gs = self.group_size
        if axis == "per_tensor":
            self.n_groups = 1 if n * d else 0
        elif axis == "per_token":
            s = _segments(d, gs)
            self.n_groups = s if mode == "static" else n * s
        elif axis == "per_channel":
            self.n_groups = d if mode == "static" else d * _segments(n, gs)
        else:
            raise ConfigError(f"unknown axis {axis!r}")
        self._gid = None
        self._order = None
        self._sizes = None

    @classmethod
    def for_spec(cls, shape, spec: QuantSpec) -> "GroupLayout":
        return cls(shape, spec.axis, spec.mode, spec.group_size)

    def group_ids(self) -> np.ndarray:
        if self._gid is None:
            n, d = self.shape
            gs = self.group_size
            if self.axis == "per_tensor":
                gid = np.zeros((n, d), dtype=np.int64)
            elif self.axis == "per_token":
                seg = np.arange(d, dtype=np.int64) // gs
                if self.mode == "static":
                    gid = np.broadcast_to(seg, (n, d)).copy()
                else:
                    s = _segments(d, gs)
                    gid = np.arange(n, dtype=np.int64)[:, None] * s + seg
            else:
                if self.mode == "static":
                    gid = np.broadcast_to(np.arange(d, dtype=np.int64), (n, d)).copy()
                else:
                    t = _segments(n, gs)
                    tseg = np.arange(n, dtype=np.int64) // gs
                    gid = np.arange(d, dtype=np.int64)[None, :] * t + tseg[:, None]
            self._gid = gid
        return self._gid

    def grouping_order(self) -> np.ndarray:
        if self._order is None:
            gid = self.group_ids().ravel()
            # Row-major order is already group-major for these layouts.
            if self.axis == "per_tensor" or (self.axis == "per_token" and self.mode == "dynamic"):
                self._order = np.arange(gid.size, dtype=np.int64)
            else:
                self._order = np.argsort(gid, kind="stable")
        return self._order

    def group_sizes(self) -> np.ndarray:
        if self._sizes is None:
            self._sizes = np.bincount(self.group_ids().ravel(), minlength=self.n_groups)
        return self._sizes

    def vector_axis(self) -> int:
        """Axis along which dense-and-sparse vectors run: 1 = rows, 0 = columns."""
        return 0 if self.axis == "per_channel" else 1


@dataclass
class QuantParams:
    """Frozen per-group (scale, zero) pairs plus degenerate-group constants."""

    axis: str
    mode: str
    group_size: int
    shape: tuple[int, int]
    scale: np.ndarray
    zero: np.ndarray
    degenerate: np.ndarray
    constant: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.scale.size

    def layout_for(self, shape: tuple[int, int]) -> GroupLayout:
        """Layout of ``shape`` under these parameters; raises on mismatch."""
        if self.mode == "dynamic":
            if tuple(shape) != tuple(self.shape):
                raise LayoutError(
                    "dynamic parameters are bound to the tensor they were computed on",
                    params_shape=list(self.shape),
                    tensor_shape=list(shape),
                )
        elif shape[1] != self.shape[1]:
            raise LayoutError(
                "static parameters calibrated for a different width",
                params_width=int(self.shape[1]),
                tensor_width=int(shape[1]),
            )
        layout = GroupLayout(shape, self.axis, self.mode, self.group_size)
        if layout.n_groups != self.n_groups and not (self.mode == "static" and shape[0] == 0):
            raise LayoutError(
                "group count mismatch",
                params_groups=int(self.n_groups),
                layout_groups=int(layout.n_groups),
            )
        return layout


@dataclass
class QuantizedTensor:
    """Bit-packed codes plus parameters and optional full-precision outliers."""

    shape: tuple[int, int]
    spec: QuantSpec
    params: QuantParams
    packed: bytes
    outlier_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    outlier_values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float64))

    @property
    def size(self) -> int:
        return int(self.shape[0] * self.shape[1])

    def layout(self) -> GroupLayout:
        return self.params.layout_for(self.shape)

    def codes(self) -> np.ndarray:
        """Unpacked [n, d] integer codes."""
        layout = self.layout()
        grouped = unpack_codes(self.packed, layout.group_sizes(), self.spec.bits)
        flat = np.empty(self.size, dtype=np.uint8)
        flat[layout.grouping_order()] = grouped
        return flat.reshape(self.shape)


def _coerce_exclude(exclude, n: int) -> np.ndarray:
    rows = np.asarray(sorted(set(int(i) for i in (exclude or ()))), dtype=np.int64)
    if rows.size and (rows[0] < 0 or rows[-1] >= n):
        raise BoundsError(
            "excluded token index out of range", tokens=n, index=int(rows[-1] if rows[-1] >= n else rows[0])
        )
    return rows


def _outlier_selection(x: np.ndarray, spec: QuantSpec):
    """Flat indices (sorted) and values of the per-vector top-|.| entries."""
    n, d = x.shape
    if spec.sparse_fraction <= 0.0 or x.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    layout_axis = 0 if spec.axis == "per_channel" else 1
    veclen = n if layout_axis == 0 else d
    k = int(np.rint(spec.sparse_fraction * veclen))
    if k <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    k = min(k, veclen)
    mag = np.abs(x)
    if layout_axis == 1:
        picked = np.argsort(-mag, axis=1, kind="stable")[:, :k]
        flat = (np.arange(n, dtype=np.int64)[:, None] * d + picked).ravel()
    else:
        picked = np.argsort(-mag, axis=0, kind="stable")[:k, :]
        flat = (picked * d + np.arange(d, dtype=np.int64)[None, :]).ravel()
    flat = np.sort(flat)
    return flat, x.ravel()[flat].copy()


def _group_minmax(x, layout: GroupLayout, valid: np.ndarray, clip: float | None):
    """Per-group (cmin, cmax, count) over positions marked valid."""
    gid = layout.group_ids().ravel()
    vals = x.ravel()
    keep = valid.ravel()
    gid_v = gid[keep]
    vals_v = vals[keep]
    counts = np.bincount(gid_v, minlength=layout.n_groups)
    cmin = np.zeros(layout.n_groups)
    cmax = np.zeros(layout.n_groups)
    present = counts > 0
    if gid_v.size:
        if clip:
            order = np.lexsort((vals_v, gid_v))
        else:
            order = np.argsort(gid_v, kind="stable")
        sorted_vals = vals_v[order]
        starts = np.concatenate(([0], np.cumsum(counts)))[:-1]
        if clip:
            # Linear-interpolated quantiles at clip and 1-clip per group.
            pos_lo = clip * (counts - 1)
            pos_hi = (1.0 - clip) * (counts - 1)
            for target, pos in ((cmin, pos_lo), (cmax, pos_hi)):
                base = np.floor(pos).astype(np.int64)
                frac = pos - base
                idx0 = starts + np.where(present, base, 0)
                idx1 = np.minimum(idx0 + 1, starts + np.maximum(counts - 1, 0))
                lo = sorted_vals[np.minimum(idx0, sorted_vals.size - 1)]
                hi = sorted_vals[np.minimum(idx1, sorted_vals.size - 1)]
                target[:] = lo * (1.0 - frac) + hi * frac
        else:
            pstarts = starts[present]
            cmin[present] = np.minimum.reduceat(sorted_vals, pstarts)
            cmax[present] = np.maximum.reduceat(sorted_vals, pstarts)
    cmin[~present] = 0.0
    cmax[~present] = 0.0
    return cmin, cmax, counts


def _params_from_minmax(spec: QuantSpec, shape, cmin, cmax, counts) -> QuantParams:
    rng = cmax - cmin
    degenerate = (counts == 0) | (rng <= 0.0)
    scale = np.where(degenerate, 1.0, rng / spec.levels)
    zero = np.where(degenerate, 0, -np.rint(cmin / scale)).astype(np.int64)
    constant = np.where(counts == 0, 0.0, cmin)
    return QuantParams(
        axis=spec.axis,
        mode=spec.mode,
        group_size=spec.group_size,
        shape=tuple(int(s) for s in shape),
        scale=scale,
        zero=zero,
        degenerate=degenerate,
        constant=constant,
    )


def compute_params(x, spec: QuantSpec, exclude=None, outlier_mask=None) -> QuantParams:
    """Per-group (scale, zero) for ``x`` under ``spec``.

    Token rows in ``exclude`` contribute to no group statistics. When the
    spec isolates outliers and no explicit ``outlier_mask`` is given, the
    per-vector selection is applied first so parameters cover the remainder.
    """
    arr = _canonical(x)
    layout = GroupLayout.for_spec(arr.shape, spec)
    valid = np.ones(arr.shape, dtype=bool)
    rows = _coerce_exclude(exclude, arr.shape[0])
    if rows.size:
        valid[rows, :] = False
    if outlier_mask is None and spec.sparse_fraction > 0.0:
        idx, _ = _outlier_selection(arr, spec)
        outlier_mask = np.zeros(arr.size, dtype=bool)
        outlier_mask[idx] = True
        outlier_mask = outlier_mask.reshape(arr.shape)
    if outlier_mask is not None:
        valid &= ~outlier_mask
    cmin, cmax, counts = _group_minmax(arr, layout, valid, spec.clip)
    return _params_from_minmax(spec, arr.shape, cmin, cmax, counts)


def _encode(arr: np.ndarray, params: QuantParams, spec: QuantSpec, out_idx, out_val) -> QuantizedTensor:
    layout = params.layout_for(arr.shape)
    gid = layout.group_ids()
    scale = params.scale[gid]
    zero = params.zero[gid]
    deg = params.degenerate[gid]
    codes = np.clip(np.rint(arr / scale) + zero, 0, spec.levels)
    codes = np.where(deg, 0, codes).astype(np.uint8)
    grouped = codes.ravel()[layout.grouping_order()]
    packed = pack_codes(grouped, layout.group_sizes(), spec.bits)
    return QuantizedTensor(
        shape=tuple(int(s) for s in arr.shape),
        spec=spec,
        params=params,
        packed=packed,
        outlier_indices=out_idx,
        outlier_values=out_val,
    )


def quantize(x, params: QuantParams, spec: QuantSpec) -> QuantizedTensor:
    """Encode ``x`` with pre-computed parameters.

    With ``sparse_fraction`` > 0 the per-vector outliers are pulled out of the
    tensor first (the parameters should have been computed on the remainder).
    """
    arr = _canonical(x)
    if (params.axis, params.group_size) != (spec.axis, spec.group_size) or params.mode != spec.mode:
        raise LayoutError(
            "parameters were computed under a different spec",
            params=(params.axis, params.mode, params.group_size),
            spec=(spec.axis, spec.mode, spec.group_size),
        )
    idx, vals = _outlier_selection(arr, spec)
    return _encode(arr, params, spec, idx, vals)


def quantize_tensor(x, spec: QuantSpec, params: QuantParams | None = None, exclude=None) -> QuantizedTensor:
    """One-call pipeline: isolate outliers, derive parameters, encode."""
    arr = _canonical(x)
    idx, vals = _outlier_selection(arr, spec)
    if params is None:
        mask = None
        if idx.size:
            mask = np.zeros(arr.size, dtype=bool)
            mask[idx] = True
            mask = mask.reshape(arr.shape)
        params = compute_params(arr, spec, exclude=exclude, outlier_mask=mask)
    return _encode(arr, params, spec, idx, vals)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """Reconstruct ``x' = scale * (code - zero)`` with outliers restored exactly."""
    layout = qt.layout()
    gid = layout.group_ids()
    codes = qt.codes().astype(np.float64)
    out = qt.params.scale[gid] * (codes - qt.params.zero[gid])
    deg = qt.params.degenerate[gid]
    if deg.any():
        out = np.where(deg, qt.params.constant[gid], out)
    if qt.outlier_indices.size:
        flat = out.ravel()
        flat[qt.outlier_indices] = qt.outlier_values
        out = flat.reshape(qt.shape)
    return out


class CalibrationSet:
    """Tensors sampled for static calibration, with optional per-sample sinks."""

    def __init__(self, samples=(), sinks=None):
        self.samples: list[np.ndarray] = []
        self.sinks: list = []
        sinks = list(sinks) if sinks is not None else [None] * len(list(samples))
        samples = list(samples)
        if len(sinks) != len(samples):
            raise CalibrationError("one sink set per calibration sample expected")
        for sample, s in zip(samples, sinks):
            self.add(sample, s)

    def add(self, sample, sinks=None):
        arr = _canonical(sample, name="calibration sample")
        if self.samples and arr.shape[1] != self.samples[0].shape[1]:
            raise ShapeError(
                "calibration samples must share trailing dimensions",
                expected=int(self.samples[0].shape[1]),
                actual=int(arr.shape[1]),
            )
        self.samples.append(arr)
        self.sinks.append(sinks)

    def __len__(self):
        return len(self.samples)


def calibrate(cal, spec: QuantSpec, exclude_sinks: bool = False, sinks_per_sample=None) -> QuantParams:
    """Global min-max calibration across samples, frozen for reuse.

    With ``exclude_sinks`` the given sink-token rows are dropped from the
    statistics of every sample. Dense-and-sparse specs strip each sample's
    per-vector outliers before accumulating extrema.
    """
    if spec.mode != "static":
        raise ConfigError("calibration applies to static mode only", mode=spec.mode)
    if not isinstance(cal, CalibrationSet):
        cal = CalibrationSet(cal)
    if len(cal) == 0:
        raise CalibrationError("empty calibration set")
    if sinks_per_sample is None:
        sinks_per_sample = cal.sinks
    if len(sinks_per_sample) != len(cal):
        raise CalibrationError("one sink set per calibration sample expected")

    blocks = []
    masks = []
    excludes = []
    offset = 0
    for sample, sinks in zip(cal.samples, sinks_per_sample):
        blocks.append(sample)
        idx, _ = _outlier_selection(sample, spec)
        mask = np.zeros(sample.size, dtype=bool)
        mask[idx] = True
        masks.append(mask.reshape(sample.shape))
        if exclude_sinks and sinks is not None:
            rows = _coerce_exclude(sinks, sample.shape[0])
            excludes.extend(int(r) + offset for r in rows)
        offset += sample.shape[0]
    combined = np.vstack(blocks)
    mask = np.vstack(masks)
    params = compute_params(combined, spec, exclude=excludes, outlier_mask=mask)
    return params


@dataclass(frozen=True)
class SchemePreset:
    """Named (key, value) quantization pairing."""

    name: str
    key_axis: str
    key_mode: str
    value_axis: str
    value_mode: str
    default_sparse: float = 0.0


SCHEME_PRESETS = {
    "pt_kv_static": SchemePreset("pt_kv_static", "per_token", "static", "per_token", "static"),
    "pt_kv_dynamic": SchemePreset("pt_kv_dynamic", "per_token", "dynamic", "per_token", "dynamic"),
    "pc_key_pt_value_static": SchemePreset(
        "pc_key_pt_value_static", "per_channel", "static", "per_token", "static"
    ),
    "kvquant_like": SchemePreset(
        "kvquant_like", "per_channel", "static", "per_token", "dynamic", default_sparse=0.01
    ),
}


def scheme_specs(
    scheme: str, bits: int, group_size: int, sparse_fraction: float | None = None, clip: float | None = None
) -> tuple[QuantSpec, QuantSpec]:
    """(key spec, value spec) for a named preset."""
    preset = SCHEME_PRESETS.get(scheme)
    if preset is None:
        raise ConfigError(f"unknown scheme preset {scheme!r}", allowed=sorted(SCHEME_PRESETS))
    fs = preset.default_sparse if sparse_fraction is None else sparse_fraction
    key = QuantSpec(bits, preset.key_axis, preset.key_mode, group_size, clip, fs)
    value = QuantSpec(bits, preset.value_axis, preset.value_mode, group_size, clip, fs)
    return key, value


def quantize_scheme(
    keys,
    values,
    scheme: str,
    sinks=(),
    *,
    bits: int = 4,
    group_size: int = 16,
    sparse_fraction: float | None = None,
    clip: float | None = None,
    key_params: QuantParams | None = None,
    value_params: QuantParams | None = None,
    key_calibration=None,
    value_calibration=None,
) -> tuple[QuantizedTensor, QuantizedTensor]:
    """Quantize a (K, V) pair under a named preset, skipping sink rows.

    Sink-token rows never enter the quantized tensors; the caller keeps them
    at full precision (normally in the cache's sink region). Static sides use
    ``*_params`` when given, otherwise calibrate on the supplied calibration
    set, otherwise self-calibrate on the non-sink rows of the input.
    """
    k_arr = _canonical(keys, name="keys")
    v_arr = _canonical(values, name="values")
    if k_arr.shape[0] != v_arr.shape[0]:
        raise ShapeError(
            "keys and values must have the same token count",
            keys=list(k_arr.shape),
            values=list(v_arr.shape),
        )
    key_spec, value_spec = scheme_specs(scheme, bits, group_size, sparse_fraction, clip)
    rows = _coerce_exclude(sinks, k_arr.shape[0])
    keep = np.ones(k_arr.shape[0], dtype=bool)
    keep[rows] = False

    def _side(arr, spec, params, calibration):
        sub = arr[keep]
        if spec.mode == "static" and params is None:
            source = calibration if calibration is not None else [sub]
            params = calibrate(source, spec)
        return quantize_tensor(sub, spec, params=params)

    return (
        _side(k_arr, key_spec, key_params, key_calibration),
        _side(v_arr, value_spec, value_params, value_calibration),
    )
