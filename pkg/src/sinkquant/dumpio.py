"""Binary tensor dumps, manifests, and quantized-tensor files.

Tensor dump format (``.kvsd``), all integers little-endian:

    offset  size        field
    0       4           magic ``KVSD``
    4       4           format version (uint32, currently 1)
    8       4           dtype code (uint32: 1 = float32, 2 = float64)
    12      4           ndim (uint32, 1..8)
    16      8 * ndim    dims (uint64 each, all nonzero)
    ...     payload     row-major values, little-endian

Quantized tensor format (``.kvsq``): magic ``KVSQ``, version, a
length-prefixed JSON header describing the quantization settings, group
layout, and section byte lengths, then raw little-endian sections in order:
scales (f64), zeros (i64), degenerate flags (u8), constants (f64), outlier
indices (u64), outlier values (f64), packed codes.

All writes go through a temp file and ``os.replace`` so readers never see a
partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError, ShapeError
from .quant import QuantParams, QuantizedTensor, QuantSpec

MAGIC = b"KVSD"
QMAGIC = b"KVSQ"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_MAX_NDIM = 8

#: Activation kinds the decoder can capture; manifests must use these names.
CAPTURE_KINDS = ("H", "H_prime", "X_d_in", "X_d_out", "Q", "K", "V", "A")


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dump(path: str, tensor, dtype: str = "float64") -> None:
    """Write a tensor to a ``.kvsd`` file (atomic, bit-exact round trip)."""
    arr = np.asarray(tensor)
    if arr.ndim == 0 or arr.ndim > _MAX_NDIM:
        raise ShapeError(f"dump rank must be 1..{_MAX_NDIM}, got {arr.ndim}")
    if any(d == 0 for d in arr.shape):
        raise ShapeError(f"zero-sized dimensions are not allowed, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("refusing to dump non-finite values", path=path)
    np_dtype = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}.get(dtype)
    if np_dtype is None:
        raise FormatError(f"unsupported dump dtype {dtype!r}", allowed=["float32", "float64"])
    code = 1 if dtype == "float32" else 2
    header = MAGIC + struct.pack("<III", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
    _atomic_write(path, header + payload)


def read_dump(path: str) -> np.ndarray:
    """Read a ``.kvsd`` file; returns the array in its stored dtype."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read dump: {exc}", path=path) from exc
    if len(blob) < 16:
        raise FormatError("dump shorter than the fixed header", path=path, offset=0, actual=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError("bad magic", path=path, offset=0, expected=MAGIC.decode(), actual=repr(blob[:4]))
    version, code, ndim = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise FormatError("unsupported format version", path=path, offset=4, expected=VERSION, actual=version)
    if code not in _DTYPES:
        raise FormatError("unknown dtype code", path=path, offset=8, actual=code)
    if not 1 <= ndim <= _MAX_NDIM:
        raise FormatError("invalid rank", path=path, offset=12, actual=ndim)
    dims_end = 16 + 8 * ndim
    if len(blob) < dims_end:
        raise FormatError("truncated dimension table", path=path, offset=16, expected=dims_end, actual=len(blob))
    dims = struct.unpack_from(f"<{ndim}Q", blob, 16)
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError("zero-sized dimension", path=path, offset=16 + 8 * i, actual=0)
    count = int(np.prod(dims, dtype=np.uint64))
    dtype = _DTYPES[code]
    expected = dims_end + count * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            "payload length mismatch", path=path, offset=dims_end, expected=expected, actual=len(blob)
        )
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=dims_end).reshape(dims)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise FormatError(
            "payload contains non-finite values", path=path, offset=dims_end + bad * dtype.itemsize
        )
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


@dataclass(frozen=True)
class ManifestEntry:
    """One dumped activation: which model/layer/kind a file holds."""

    model: str
    layer: int
    kind: str
    tokens: int
    hidden: int
    file: str

    def to_json_dict(self) -> dict:
        return {
            "model": self.model,
            "layer": self.layer,
            "kind": self.kind,
            "tokens": self.tokens,
            "hidden": self.hidden,
            "file": self.file,
        }


def write_manifest(entries, path: str) -> None:
    data = json.dumps([e.to_json_dict() for e in entries], indent=2).encode()
    _atomic_write(path, data + b"\n")


def load_manifest(path: str, validate_files: bool = True) -> list[ManifestEntry]:
    """Load and validate a manifest; referenced files must exist and shape-match."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read manifest: {exc}", path=path) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", path=path) from exc
    if not isinstance(raw, list):
        raise FormatError("manifest must be a JSON list", path=path)
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for i, obj in enumerate(raw):
        try:
            entry = ManifestEntry(
                model=str(obj["model"]),
                layer=int(obj["layer"]),
                kind=str(obj["kind"]),
                tokens=int(obj["tokens"]),
                hidden=int(obj["hidden"]),
                file=str(obj["file"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"manifest entry {i} malformed: {exc}", path=path, entry=i) from exc
        if entry.kind not in CAPTURE_KINDS:
            raise FormatError(
                "unknown capture kind", path=path, entry=i, kind=entry.kind, allowed=list(CAPTURE_KINDS)
            )
        if validate_files:
            file_path = entry.file if os.path.isabs(entry.file) else os.path.join(base, entry.file)
            arr = read_dump(file_path)
            if arr.ndim == 2 and arr.shape != (entry.tokens, entry.hidden):
                raise FormatError(
                    "dump shape does not match manifest",
                    path=file_path,
                    entry=i,
                    expected=[entry.tokens, entry.hidden],
                    actual=list(arr.shape),
                )
        entries.append(entry)
    return entries


def manifest_file_path(entry: ManifestEntry, manifest_path: str) -> str:
    if os.path.isabs(entry.file):
        return entry.file
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), entry.file)


def write_quantized(path: str, qt: QuantizedTensor) -> None:
    """Write a quantized tensor to a ``.kvsq`` file."""
    p = qt.params
    sections = [
        np.ascontiguousarray(p.scale, dtype="<f8").tobytes(),
        np.ascontiguousarray(p.zero, dtype="<i8").tobytes(),
        np.ascontiguousarray(p.degenerate, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(p.constant, dtype="<f8").tobytes(),
        np.ascontiguousarray(qt.outlier_indices, dtype="<u8").tobytes(),
        np.ascontiguousarray(qt.outlier_values, dtype="<f8").tobytes(),
        qt.packed,
    ]
    header = {
        "shape": list(qt.shape),
        "spec": {
            "bits": qt.spec.bits,
            "axis": qt.spec.axis,
            "mode": qt.spec.mode,
            "group_size": qt.spec.group_size,
            "clip": qt.spec.clip,
            "sparse_fraction": qt.spec.sparse_fraction,
        },
        "params_shape": list(p.shape),
        "n_groups": p.n_groups,
        "sections": [len(s) for s in sections],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = QMAGIC + struct.pack("<II", VERSION, len(head)) + head + b"".join(sections)
    _atomic_write(path, blob)


def read_quantized(path: str) -> QuantizedTensor:
    """Read a ``.kvsq`` file back into a QuantizedTensor."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read quantized tensor: {exc}", path=path) from exc
    if len(blob) < 12 or blob[:4] != QMAGIC:
        raise FormatError("bad magic", path=path, offset=0, expected=QMAGIC.decode())
    version, head_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError("unsupported format version", path=path, offset=4, actual=version)
    try:
        header = json.loads(blob[12 : 12 + head_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt header: {exc}", path=path, offset=12) from exc
    sections = header["sections"]
    expected = 12 + head_len + sum(sections)
    if len(blob) != expected:
        raise FormatError("payload length mismatch", path=path, expected=expected, actual=len(blob))
    spec = QuantSpec(**header["spec"])
    offset = 12 + head_len
    raw = []
    for size in sections:
        raw.append(blob[offset : offset + size])
        offset += size
    n_groups = int(header["n_groups"])

    def _arr(buf, dtype, count):
        out = np.frombuffer(buf, dtype=dtype, count=count)
        return out.astype(out.dtype.newbyteorder("="), copy=True)

    params = QuantParams(
        axis=spec.axis,
        mode=spec.mode,
        group_size=spec.group_size,
        shape=tuple(int(s) for s in header["params_shape"]),
        scale=_arr(raw[0], "<f8", n_groups),
        zero=_arr(raw[1], "<i8", n_groups),
        degenerate=np.frombuffer(raw[2], dtype=np.uint8, count=n_groups).astype(bool),
        constant=_arr(raw[3], "<f8", n_groups),
    )
    n_out = len(raw[4]) // 8
    return QuantizedTensor(
        shape=tuple(int(s) for s in header["shape"]),
        spec=spec,
        params=params,
        packed=raw[6],
        outlier_indices=_arr(raw[4], "<u8", n_out).astype(np.int64),
        outlier_values=_arr(raw[5], "<f8", n_out),
    )


def write_json(path: str, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True).encode() + b"\n")


def read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read JSON file: {exc}", path=path) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}", path=path) from exc
