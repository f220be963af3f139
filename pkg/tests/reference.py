"""Independent scalar oracles used across the test suite.

Everything here is written the slow, obvious way (per-element Python loops,
struct-based bit fiddling) so the vectorized and compiled paths are checked
against code that shares none of their machinery.
"""

import math
import struct

import numpy as np

from dynact.bitcodec import layout_coord


def f32(x):
    return np.float32(x)


def scalar_min(values):
    out = values[0]
    for v in values[1:]:
        if v < out:
            out = v
    return out


def scalar_max(values):
    out = values[0]
    for v in values[1:]:
        if v > out:
            out = v
    return out


def scalar_qparams(values, bitwidth):
    """Scalar scan for min/max, then the level-spacing formula in float32."""
    mn = f32(scalar_min(values))
    mx = f32(scalar_max(values))
    scale = f32((mx - mn) / f32((1 << bitwidth) - 1))
    return float(mn), float(scale)


def scalar_quantize(values, qmin, scale, bitwidth):
    """round((x - min)/scale) with ties away from zero, float32 arithmetic."""
    if scale == 0.0:
        return [0] * len(values)
    out = []
    qmax = (1 << bitwidth) - 1
    for v in values:
        t = float((f32(v) - f32(qmin)) / f32(scale))
        q = min(int(math.floor(t + 0.5)), qmax)
        out.append(q)
    return out


def scalar_dequantize(levels, qmin, scale):
    return [float(f32(f32(q) * f32(scale) + f32(qmin))) for q in levels]


def int_to_float_ieee(x):
    """Reference integer->float32 conversion through the standard library."""
    return struct.unpack("<f", struct.pack("<f", float(x)))[0]


def scalar_pack(values, bitwidth, tile_elems):
    """Per-element packer driven entirely by layout_coord."""
    n = len(values)
    tiles = -(-n // tile_elems) if n else 0
    words_per_tile = tile_elems * bitwidth // 32
    words = [0] * (tiles * words_per_tile)
    for e, v in enumerate(values):
        tile, off = divmod(e, tile_elems)
        coord = layout_coord(off, bitwidth, tile_elems)
        shift = 32 - coord.bit_offset - bitwidth
        words[tile * words_per_tile + coord.word_index] |= int(v) << shift
    return words


def scalar_unpack(words, bitwidth, tile_elems, logical_len):
    words_per_tile = tile_elems * bitwidth // 32
    mask = (1 << bitwidth) - 1
    out = []
    for e in range(logical_len):
        tile, off = divmod(e, tile_elems)
        coord = layout_coord(off, bitwidth, tile_elems)
        shift = 32 - coord.bit_offset - bitwidth
        out.append((words[tile * words_per_tile + coord.word_index] >> shift) & mask)
    return out
