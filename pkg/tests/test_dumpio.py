import hashlib
import json
import os
import struct

import numpy as np
import pytest

from sinkquant.dumpio import (
    CAPTURE_KINDS,
    ManifestEntry,
    load_manifest,
    read_dump,
    read_json,
    read_quantized,
    write_dump,
    write_json,
    write_manifest,
    write_quantized,
)
from sinkquant.errors import FormatError, NumericError, ShapeError
from sinkquant.quant import QuantSpec, dequantize, quantize_tensor


class TestDumpRoundTrip:
    def test_float64_bitwise(self, tmp_path):
        path = str(tmp_path / "a.kvsd")
        x = np.random.default_rng(0).normal(size=(3, 5))
        write_dump(path, x)
        back = read_dump(path)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, x)

    def test_float32_bitwise(self, tmp_path):
        path = str(tmp_path / "a.kvsd")
        x = np.random.default_rng(1).normal(size=(4, 2)).astype(np.float32)
        write_dump(path, x, dtype="float32")
        back = read_dump(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, x)

    def test_high_rank(self, tmp_path):
        path = str(tmp_path / "a.kvsd")
        x = np.arange(24.0).reshape(2, 3, 4)
        write_dump(path, x)
        np.testing.assert_array_equal(read_dump(path), x)

    def test_header_layout(self, tmp_path):
        path = str(tmp_path / "a.kvsd")
        write_dump(path, np.zeros((2, 3)))
        blob = open(path, "rb").read()
        assert blob[:4] == b"KVSD"
        version, dtype_code, ndim = struct.unpack_from("<III", blob, 4)
        assert (version, dtype_code, ndim) == (1, 2, 2)
        assert struct.unpack_from("<2Q", blob, 16) == (2, 3)
        assert len(blob) == 16 + 16 + 6 * 8


class TestDumpErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.kvsd"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError) as err:
            read_dump(str(path))
        assert err.value.context["offset"] == 0

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.kvsd"
        path.write_bytes(b"KVSD" + struct.pack("<III", 9, 2, 1) + struct.pack("<Q", 1) + b"\x00" * 8)
        with pytest.raises(FormatError) as err:
            read_dump(str(path))
        assert err.value.context["offset"] == 4

    def test_bad_dtype_code(self, tmp_path):
        path = tmp_path / "bad.kvsd"
        path.write_bytes(b"KVSD" + struct.pack("<III", 1, 7, 1) + struct.pack("<Q", 1) + b"\x00" * 8)
        with pytest.raises(FormatError) as err:
            read_dump(str(path))
        assert err.value.context["offset"] == 8

    def test_truncated_payload_reports_lengths(self, tmp_path):
        path = tmp_path / "t.kvsd"
        write_dump(str(path), np.zeros(4))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError) as err:
            read_dump(str(path))
        assert err.value.context["expected"] == len(blob)
        assert err.value.context["actual"] == len(blob) - 8

    def test_zero_dim_rejected_on_read(self, tmp_path):
        path = tmp_path / "z.kvsd"
        path.write_bytes(b"KVSD" + struct.pack("<III", 1, 2, 2) + struct.pack("<QQ", 0, 3))
        with pytest.raises(FormatError) as err:
            read_dump(str(path))
        assert err.value.context["offset"] == 16

    def test_zero_dim_rejected_on_write(self, tmp_path):
        with pytest.raises(ShapeError):
            write_dump(str(tmp_path / "z.kvsd"), np.zeros((0, 3)))
        with pytest.raises(ShapeError):
            write_dump(str(tmp_path / "s.kvsd"), np.float64(3.0))

    def test_non_finite_rejected_both_ways(self, tmp_path):
        path = tmp_path / "n.kvsd"
        with pytest.raises(NumericError):
            write_dump(str(path), np.array([1.0, np.nan]))
        good = np.zeros(2)
        write_dump(str(path), good)
        blob = bytearray(path.read_bytes())
        blob[-8:] = struct.pack("<d", np.inf)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_dump(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            read_dump(str(tmp_path / "absent.kvsd"))

    def test_no_temp_files_left_behind(self, tmp_path):
        write_dump(str(tmp_path / "x.kvsd"), np.ones(3))
        assert sorted(os.listdir(tmp_path)) == ["x.kvsd"]


class TestManifest:
    def build(self, tmp_path, tokens=4, hidden=6):
        arr = np.random.default_rng(2).normal(size=(tokens, hidden))
        write_dump(str(tmp_path / "h.kvsd"), arr)
        entry = ManifestEntry(model="toy", layer=0, kind="H", tokens=tokens, hidden=hidden, file="h.kvsd")
        path = str(tmp_path / "manifest.json")
        write_manifest([entry], path)
        return path, entry

    def test_roundtrip(self, tmp_path):
        path, entry = self.build(tmp_path)
        assert load_manifest(path) == [entry]

    def test_unknown_kind(self, tmp_path):
        path, entry = self.build(tmp_path)
        raw = json.load(open(path))
        raw[0]["kind"] = "Z"
        json.dump(raw, open(path, "w"))
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        path, entry = self.build(tmp_path)
        os.unlink(tmp_path / "h.kvsd")
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_shape_mismatch(self, tmp_path):
        path, entry = self.build(tmp_path)
        raw = json.load(open(path))
        raw[0]["tokens"] = 99
        json.dump(raw, open(path, "w"))
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_capture_kind_names(self):
        assert CAPTURE_KINDS == ("H", "H_prime", "X_d_in", "X_d_out", "Q", "K", "V", "A")


class TestQuantizedFile:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(12, 16))
        spec = QuantSpec(3, "per_channel", "dynamic", group_size=5, sparse_fraction=0.1)
        qt = quantize_tensor(x, spec)
        path = str(tmp_path / "q.kvsq")
        write_quantized(path, qt)
        back = read_quantized(path)
        assert back.spec == qt.spec
        assert back.shape == qt.shape
        assert back.packed == qt.packed
        np.testing.assert_array_equal(back.outlier_indices, qt.outlier_indices)
        np.testing.assert_array_equal(dequantize(back), dequantize(qt))

    def test_golden_digest_is_stable(self, tmp_path):
        # freezes the documented byte layout; any change here is format-breaking
        x = np.linspace(-1.0, 1.0, 24).reshape(4, 6)
        qt = quantize_tensor(x, QuantSpec(2, "per_token", "dynamic", group_size=3))
        path = str(tmp_path / "q.kvsq")
        write_quantized(path, qt)
        digest = hashlib.sha256(open(path, "rb").read()).hexdigest()
        assert digest == "414a0ccd3b426eff9a4df5b747c98a7c038b1ea8be71f04883f2a8fb0c17fd1d"

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "q.kvsq"
        path.write_bytes(b"KVSQ" + struct.pack("<II", 1, 4) + b"{bad")
        with pytest.raises(FormatError):
            read_quantized(str(path))

    def test_truncated_sections(self, tmp_path):
        x = np.ones((2, 4)) * np.arange(4)
        qt = quantize_tensor(x, QuantSpec(2, "per_token", group_size=4))
        path = tmp_path / "q.kvsq"
        write_quantized(str(path), qt)
        blob = path.read_bytes()
        path.write_bytes(blob[:-1])
        with pytest.raises(FormatError):
            read_quantized(str(path))


def test_json_helpers(tmp_path):
    path = str(tmp_path / "x.json")
    write_json(path, {"a": [1, 2]})
    assert read_json(path) == {"a": [1, 2]}
    with pytest.raises(FormatError):
        read_json(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(FormatError):
        read_json(str(bad))
