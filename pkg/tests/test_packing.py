import numpy as np
import pytest

from sinkquant.errors import FormatError
from sinkquant.packing import pack_codes, pack_group_bytes, packed_nbytes, unpack_codes


def test_two_bit_golden_bytes():
    # codes 0,1,2,3 LSB-first in one byte: 0b11_10_01_00
    assert pack_codes(np.array([0, 1, 2, 3]), [4], 2) == bytes([0xE4])


def test_three_bit_golden_bytes():
    # 1,2,3 -> bitstream 100 010 110 -> byte0 0b11010001, byte1 0
    assert pack_codes(np.array([1, 2, 3]), [3], 3) == bytes([0xD1, 0x00])


def test_eight_bit_is_identity():
    codes = np.array([0, 17, 255, 128], dtype=np.uint8)
    assert pack_codes(codes, [4], 8) == codes.tobytes()


def test_groups_start_on_byte_boundaries():
    one = pack_codes(np.array([5]), [1], 3)
    two = pack_codes(np.array([5, 5]), [1, 1], 3)
    assert len(one) == 1 and len(two) == 2
    assert two == one + one


def test_packed_nbytes():
    assert packed_nbytes(16, 2) == 4
    assert packed_nbytes(3, 3) == 2
    assert packed_nbytes(0, 4) == 0
    np.testing.assert_array_equal(pack_group_bytes([16, 5], 3), [6, 2])


@pytest.mark.parametrize("bits", [2, 3, 4, 5, 8])
def test_roundtrip_random_groups(bits):
    rng = np.random.default_rng(bits)
    for _ in range(20):
        n_groups = int(rng.integers(1, 6))
        sizes = rng.integers(0, 9, size=n_groups)
        codes = rng.integers(0, 2**bits, size=int(sizes.sum())).astype(np.uint8)
        buf = pack_codes(codes, sizes, bits)
        assert len(buf) == int(pack_group_bytes(sizes, bits).sum())
        np.testing.assert_array_equal(unpack_codes(buf, sizes, bits), codes)


def test_empty_stream():
    assert pack_codes(np.zeros(0, dtype=np.uint8), [], 4) == b""
    assert unpack_codes(b"", [], 4).size == 0


def test_size_mismatch_rejected():
    with pytest.raises(FormatError):
        pack_codes(np.array([1, 2]), [3], 2)
    with pytest.raises(FormatError):
        unpack_codes(b"\x00", [16], 2)
