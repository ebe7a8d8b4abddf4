"""Bit-packing codec for low-bit integer codes.

Layout (stable; golden-file tested):

* groups are emitted in ascending group-id order;
* each group's codes form a little-endian bitstream (code ``j`` occupies bit
  positions ``[j*bits, (j+1)*bits)``, bit 0 of a byte is the LSB);
* each group is padded up to a byte boundary, so group ``g`` starts at byte
  ``sum(ceil(len_i*bits/8) for i < g)``.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def packed_nbytes(count: int, bits: int) -> int:
    """Bytes needed for ``count`` codes of ``bits`` bits, byte-padded."""
    return (count * bits + 7) // 8


def pack_group_bytes(group_sizes: np.ndarray, bits: int) -> np.ndarray:
    """Per-group packed byte counts."""
    return (np.asarray(group_sizes, dtype=np.int64) * bits + 7) // 8


def pack_codes(codes: np.ndarray, group_sizes, bits: int) -> bytes:
    """Pack integer codes grouped per ``group_sizes`` into bytes.

    ``codes`` must be ordered group-major (all of group 0, then group 1, ...)
    and every code must fit in ``bits`` bits.
    """
    codes = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    sizes = np.asarray(group_sizes, dtype=np.int64)
    if sizes.sum() != codes.size:
        raise FormatError(
            "group sizes do not cover the code stream",
            expected=int(sizes.sum()),
            actual=int(codes.size),
        )
    nbytes = pack_group_bytes(sizes, bits)
    total_bytes = int(nbytes.sum())
    if codes.size == 0:
        return b""
    # Global bit position of each code: group byte offset * 8 + in-group offset.
    group_byte_start = np.concatenate(([0], np.cumsum(nbytes)[:-1]))
    code_group = np.repeat(np.arange(sizes.size), sizes)
    in_group = np.arange(codes.size) - np.repeat(np.concatenate(([0], np.cumsum(sizes)[:-1])), sizes)
    code_bitpos = group_byte_start[code_group] * 8 + in_group * bits

    bit_matrix = ((codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    bitstream = np.zeros(total_bytes * 8, dtype=np.uint8)
    positions = code_bitpos[:, None] + np.arange(bits)
    bitstream[positions.ravel()] = bit_matrix.ravel()
    return np.packbits(bitstream, bitorder="little").tobytes()


def unpack_codes(buf: bytes, group_sizes, bits: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns a uint8 code stream."""
    sizes = np.asarray(group_sizes, dtype=np.int64)
    total = int(sizes.sum())
    nbytes = pack_group_bytes(sizes, bits)
    expected = int(nbytes.sum())
    if len(buf) != expected:
        raise FormatError(
            "packed code buffer has wrong length",
            expected=expected,
            actual=len(buf),
        )
    if total == 0:
        return np.zeros(0, dtype=np.uint8)
    bitstream = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    group_byte_start = np.concatenate(([0], np.cumsum(nbytes)[:-1]))
    code_group = np.repeat(np.arange(sizes.size), sizes)
    in_group = np.arange(total) - np.repeat(np.concatenate(([0], np.cumsum(sizes)[:-1])), sizes)
    code_bitpos = group_byte_start[code_group] * 8 + in_group * bits
    positions = code_bitpos[:, None] + np.arange(bits)
    bits_taken = bitstream[positions]
    weights = (1 << np.arange(bits)).astype(np.uint16)
    return (bits_taken.astype(np.uint16) @ weights).astype(np.uint8)
