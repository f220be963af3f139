"""Bit-exact float/uint conversion and b-bit packing into 32-bit words.

Packed layout
-------------
Elements are framed into tiles of ``tile_elems`` values; the last tile is
zero-padded. Within a tile, every run of 4 * (32/b) elements forms a group of
four words: element r of the group goes to word r % 4 (the lane) at slot
r // 4, with slot 0 in the most significant bits. Unpacking a slot is
therefore a left shift by slot*b followed by a right shift by 32-b, and four
lanes can be processed as one vector.

Serialized form: 28-byte header (magic "DAFP", version, bitwidth, reserved,
logical length, quantization min/scale, tile size) followed by the words,
little-endian.

Float/uint conversion uses the exponent-bias route: for 0 <= x < 2^23,
OR-ing the bits of x with 0x4B000000 yields the float 2^23 + x, so a single
subtraction recovers x exactly; the reverse adds 2^23 and masks the mantissa.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import CorruptData, InvalidInput

MAGIC = b"DAFP"
VERSION = 1
HEADER_SIZE = 28
DEFAULT_TILE_ELEMS = 256
PACKABLE_BITWIDTHS = (2, 4, 8)

_HEADER = struct.Struct("<4sBB2sQffI")
_EXP_150 = 0x4B000000
_TWO_23 = 8388608.0


def uint_bits_to_float(x):
    """Exact integer-to-float conversion of 0 <= x < 2^23 via bit surgery:
    reinterpret (x | 0x4B000000) as a float, then subtract 2^23."""
    x = int(x)
    if not 0 <= x < 1 << 23:
        raise InvalidInput("uint_bits_to_float: value must lie in [0, 2^23)")
    f = struct.unpack("<f", struct.pack("<I", x | _EXP_150))[0]
    return f - _TWO_23


def float_to_uint_bits(v):
    """Inverse of :func:`uint_bits_to_float`: add 2^23, reinterpret as bits,
    mask the 23 mantissa bits."""
    v = float(v)
    if not (math.isfinite(v) and 0.0 <= v < 1 << 23 and v == math.floor(v)):
        raise InvalidInput(
            "float_to_uint_bits: value must be an exact integer in [0, 2^23)"
        )
    bits = struct.unpack("<I", struct.pack("<f", v + _TWO_23))[0]
    return bits & 0x007FFFFF


def values_per_word(bitwidth):
    if bitwidth not in PACKABLE_BITWIDTHS:
        raise InvalidInput(f"bitwidth must be one of {PACKABLE_BITWIDTHS}")
    return 32 // bitwidth


def group_elems(bitwidth):
    """Interleave period: one four-word group holds 4 * (32/b) elements."""
    return 4 * values_per_word(bitwidth)


def check_tile_elems(tile_elems, bitwidth):
    g = group_elems(bitwidth)
    if tile_elems <= 0 or tile_elems % g != 0:
        raise InvalidInput(
            f"tile_elems must be a positive multiple of {g} for bitwidth {bitwidth}"
        )
    return tile_elems


def words_for(logical_len, tile_elems, bitwidth):
    tiles = -(-logical_len // tile_elems)
    return tiles * tile_elems * bitwidth // 32


def packed_size_bytes(numel, bitwidth, tile_elems=DEFAULT_TILE_ELEMS):
    """Serialized byte size of numel elements stored at the given width.

    Width 0 stores nothing; width 32 is a raw float32 passthrough without a
    packing header.
    """
    if bitwidth == 0:
        return 0
    if bitwidth == 32:
        return 4 * numel
    check_tile_elems(tile_elems, bitwidth)
    return HEADER_SIZE + 4 * words_for(numel, tile_elems, bitwidth)


@dataclass(frozen=True)
class LayoutCoord:
    word_index: int
    bit_offset: int  # from the most significant bit; multiple of the bitwidth


def layout_coord(e, bitwidth, tile_elems=DEFAULT_TILE_ELEMS):
    """Tile-relative (word, bit offset) of logical element e."""
    check_tile_elems(tile_elems, bitwidth)
    if not 0 <= e < tile_elems:
        raise InvalidInput(f"element index {e} outside tile of {tile_elems}")
    v = values_per_word(bitwidth)
    g, r = divmod(e, 4 * v)
    lane = r % 4
    slot = r // 4
    return LayoutCoord(word_index=4 * g + lane, bit_offset=bitwidth * slot)


@dataclass
class PackedBuffer:
    """Header fields plus the packed 32-bit words."""

    bitwidth: int
    logical_len: int
    qmin: float
    qscale: float
    tile_elems: int
    words: np.ndarray

    @property
    def size_bytes(self):
        return HEADER_SIZE + 4 * len(self.words)

    def validate(self):
        """Structural checks; raises CorruptData on any violation."""
        if self.bitwidth not in PACKABLE_BITWIDTHS:
            raise CorruptData(f"bad bitwidth {self.bitwidth}")
        g = group_elems(self.bitwidth)
        if self.tile_elems <= 0 or self.tile_elems % g != 0:
            raise CorruptData(f"bad tile_elems {self.tile_elems}")
        if self.logical_len < 0:
            raise CorruptData("negative logical length")
        expect = words_for(self.logical_len, self.tile_elems, self.bitwidth)
        if len(self.words) != expect:
            raise CorruptData(
                f"word count {len(self.words)} != expected {expect}"
            )
        return self


def pack(q_values, qparams, tile_elems=DEFAULT_TILE_ELEMS):
    """Pack quantized levels into the tiled interleaved word layout.

    Pads the tail tile with zero elements; byte-deterministic for identical
    input.
    """
    b = qparams.bitwidth
    if b not in PACKABLE_BITWIDTHS:
        raise InvalidInput(f"pack: bitwidth must be one of {PACKABLE_BITWIDTHS}")
    check_tile_elems(tile_elems, b)
    vals = np.ascontiguousarray(q_values, dtype=np.uint32).ravel()
    if vals.size and int(vals.max()) >= 1 << b:
        raise InvalidInput(f"pack: value out of range for bitwidth {b}")
    padded_len = -(-vals.size // tile_elems) * tile_elems
    if padded_len != vals.size:
        padded = np.zeros(padded_len, dtype=np.uint32)
        padded[: vals.size] = vals
    else:
        padded = vals
    words = kernels.pack_groups(padded, b) if padded_len else np.empty(0, np.uint32)
    return PackedBuffer(
        bitwidth=b,
        logical_len=vals.size,
        qmin=float(np.float32(qparams.min)),
        qscale=float(np.float32(qparams.scale)),
        tile_elems=tile_elems,
        words=np.asarray(words, dtype=np.uint32),
    )


def unpack(buf):
    """Recover the first logical_len quantized levels (padding discarded)."""
    buf.validate()
    if buf.logical_len == 0:
        return np.empty(0, dtype=np.uint32)
    vals = kernels.unpack_groups(buf.words, buf.bitwidth)
    return np.asarray(vals, dtype=np.uint32)[: buf.logical_len]


def serialize(buf):
    buf.validate()
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        buf.bitwidth,
        b"\x00\x00",
        buf.logical_len,
        np.float32(buf.qmin),
        np.float32(buf.qscale),
        buf.tile_elems,
    )
    return header + np.ascontiguousarray(buf.words, dtype="<u4").tobytes()


def deserialize(data):
    """Parse bytes back into a PackedBuffer, validating structure, word
    count, and that padding elements decode to level 0."""
    if len(data) < HEADER_SIZE:
        raise CorruptData("truncated header")
    magic, version, bitwidth, reserved, logical_len, qmin, qscale, tile_elems = (
        _HEADER.unpack_from(data)
    )
    if magic != MAGIC:
        raise CorruptData(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptData(f"unsupported version {version}")
    if reserved != b"\x00\x00":
        raise CorruptData("reserved header bytes are not zero")
    if bitwidth not in PACKABLE_BITWIDTHS:
        raise CorruptData(f"bad bitwidth {bitwidth}")
    body = len(data) - HEADER_SIZE
    if body % 4 != 0:
        raise CorruptData("word payload is not a multiple of 4 bytes")
    buf = PackedBuffer(
        bitwidth=bitwidth,
        logical_len=logical_len,
        qmin=float(qmin),
        qscale=float(qscale),
        tile_elems=tile_elems,
        words=np.frombuffer(data, dtype="<u4", offset=HEADER_SIZE).astype(np.uint32),
    )
    buf.validate()
    if buf.logical_len:
        tail = kernels.unpack_groups(buf.words, bitwidth)[buf.logical_len :]
        if tail.size and int(np.max(tail)) != 0:
            raise CorruptData("padding elements are not zero")
    return buf
