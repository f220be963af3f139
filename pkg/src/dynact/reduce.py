"""Min/max collective reduction with interchangeable execution strategies.

Five strategies produce bit-identical results (min and max are exact and
order-independent over finite floats):

* ``SEQUENTIAL``      - left-to-right scan; the oracle the others are checked
  against.
* ``PARALLEL_TREE``   - two-level grid: lanes reduce private partitions, each
  block folds its lanes by halving rounds with a barrier per round, block
  results are re-reduced pass by pass until one value remains.
* ``ATOMIC``          - every lane folds its partition locally, then publishes
  into one shared cell through a compare-and-swap retry loop.
* ``HYBRID``          - tree reduction inside each block, atomic combination
  across blocks.
* ``ATOMIC_THEN_ATOMIC`` - atomics at the lane level into a per-block cell,
  then atomics across blocks.

Blocks map to worker tasks on a shared thread pool; threads_per_block are the
lanes a block folds. Ragged partitions are padded with the identity element
(+inf for min, -inf for max).
"""

import enum
import math
import os
import statistics
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, InvariantViolation

__all__ = [
    "ReduceOp",
    "Strategy",
    "ReduceConfig",
    "AtomicFloatCell",
    "atomic_min_float",
    "atomic_max_float",
    "reduce_sequential",
    "reduce_parallel_tree",
    "reduce_atomic",
    "reduce_hybrid",
    "reduce",
    "block_tree_reduce",
    "fused_map_reduce",
    "profile_select_strategy",
    "ProfileRow",
    "save_profile",
    "load_profile",
    "select_strategy",
]


class ReduceOp(enum.Enum):
    MIN = "min"
    MAX = "max"


class Strategy(str, enum.Enum):
    SEQUENTIAL = "sequential"
    PARALLEL_TREE = "parallel_tree"
    ATOMIC = "atomic"
    HYBRID = "hybrid"
    ATOMIC_THEN_ATOMIC = "atomic_then_atomic"


@dataclass(frozen=True)
class ReduceConfig:
    """Grid shape and strategy for a reduction.

    threads_per_block must be a power of two: the in-block tree halves the
    live lane count every round.
    """

    num_blocks: int = 4
    threads_per_block: int = 8
    strategy: Strategy = Strategy.SEQUENTIAL

    def __post_init__(self):
        if self.num_blocks < 1:
            raise InvalidInput("num_blocks must be >= 1")
        t = self.threads_per_block
        if t < 1 or (t & (t - 1)) != 0:
            raise InvalidInput("threads_per_block must be a positive power of two")

    @property
    def lanes(self):
        return self.num_blocks * self.threads_per_block


def identity_value(op):
    return math.inf if op is ReduceOp.MIN else -math.inf


def _combine(op, a, b):
    return min(a, b) if op is ReduceOp.MIN else max(a, b)


def _np_reduce(op, arr):
    return float(np.min(arr) if op is ReduceOp.MIN else np.max(arr))


def _as_flat_f32(x, opname):
    arr = np.ascontiguousarray(x, dtype=np.float32).ravel()
    if arr.size == 0:
        raise InvalidInput(f"{opname}: empty tensor")
    if not np.isfinite(arr).all():
        raise InvalidInput(f"{opname}: tensor contains NaN or Inf")
    return arr


_pool = None
_pool_lock = threading.Lock()


def _executor():
    global _pool
    if _pool is None:
        with _pool_lock:
            if _pool is None:
                _pool = ThreadPoolExecutor(
                    max_workers=max(4, os.cpu_count() or 2),
                    thread_name_prefix="dynact-reduce",
                )
    return _pool


def _float_to_bits(v):
    return struct.unpack("<I", struct.pack("<f", v))[0]


def _bits_to_float(bits):
    return struct.unpack("<f", struct.pack("<I", bits))[0]


class AtomicFloatCell:
    """A 32-bit float cell mutated only through compare-and-swap on its bits.

    The CAS is the single atomic primitive; the min/max helpers build their
    retry loops on top of it, so contention behaves like hardware CAS:
    a failed swap returns the interfering value and the caller retries.
    """

    __slots__ = ("_bits", "_lock", "successful_swaps")

    def __init__(self, value):
        self._bits = _float_to_bits(value)
        self._lock = threading.Lock()
        self.successful_swaps = 0

    def load_bits(self):
        return self._bits

    def load(self):
        return _bits_to_float(self._bits)

    def compare_and_swap(self, expected_bits, new_bits):
        """Store new_bits iff the cell still holds expected_bits.

        Returns the bits observed at the moment of the attempt; the swap
        succeeded iff they equal expected_bits.
        """
        with self._lock:
            observed = self._bits
            if observed == expected_bits:
                self._bits = new_bits
                self.successful_swaps += 1
            return observed


def _atomic_update(cell, val, op, opname):
    if isinstance(val, float) and math.isnan(val):
        raise InvalidInput(f"{opname}: NaN value")
    val = _bits_to_float(_float_to_bits(float(val)))  # round to float32
    if math.isnan(val):
        raise InvalidInput(f"{opname}: NaN value")
    old = cell.load_bits()
    while True:
        assumed = old
        new_val = _combine(op, _bits_to_float(assumed), val)
        old = cell.compare_and_swap(assumed, _float_to_bits(new_val))
        if old == assumed:
            return _bits_to_float(old)


def atomic_min_float(cell, val):
    """CAS retry loop lowering the cell to min(cell, val); returns the value
    observed just before the successful swap."""
    return _atomic_update(cell, val, ReduceOp.MIN, "atomic_min_float")


def atomic_max_float(cell, val):
    return _atomic_update(cell, val, ReduceOp.MAX, "atomic_max_float")


def reduce_sequential(x, op):
    """Exact min/max by a left-to-right scan."""
    arr = _as_flat_f32(x, "reduce_sequential")
    red = np.minimum.reduce if op is ReduceOp.MIN else np.maximum.reduce
    return float(red(arr))


def _lane_bounds(n, lanes):
    chunk = -(-n // lanes)
    return [(i * chunk, min(n, (i + 1) * chunk)) for i in range(lanes)]


def block_tree_reduce(lane_values, op, on_round=None):
    """Halving tree over one block's lane partials.

    lane_values has power-of-two length; each round folds lane i+stride into
    lane i, then a barrier (implicit here) ends the round. After round r
    exactly len(lane_values) / 2^r lanes hold live partials; on_round(r, live)
    is invoked at each barrier so callers can observe that.
    """
    vals = list(lane_values)
    n = len(vals)
    if n < 1 or (n & (n - 1)) != 0:
        raise InvalidInput("block width must be a power of two")
    stride = n // 2
    rnd = 0
    while stride >= 1:
        for i in range(stride):
            vals[i] = _combine(op, vals[i], vals[i + stride])
        rnd += 1
        if on_round is not None:
            on_round(rnd, stride)
        stride //= 2
    return vals[0]


def _block_lane_partials(arr, bounds, op):
    ident = identity_value(op)
    return [
        _np_reduce(op, arr[lo:hi]) if hi > lo else ident for lo, hi in bounds
    ]


def _grid_pass(arr, op, cfg):
    """One grid-wide pass: returns the per-block results."""
    t = cfg.threads_per_block
    blocks = min(cfg.num_blocks, -(-arr.size // t))
    blocks = max(blocks, 1)
    bounds = _lane_bounds(arr.size, blocks * t)

    def run_block(b):
        lane_vals = _block_lane_partials(arr, bounds[b * t : (b + 1) * t], op)
        return block_tree_reduce(lane_vals, op)

    if blocks == 1:
        results = [run_block(0)]
    else:
        results = list(_executor().map(run_block, range(blocks)))
    return np.asarray(results, dtype=np.float32)


def reduce_parallel_tree(x, op, cfg):
    """Tree reduction within blocks, repeated passes over the per-block
    scratch results until a single value remains."""
    arr = _as_flat_f32(x, "reduce_parallel_tree")
    while arr.size > 1:
        arr = _grid_pass(arr, op, cfg)
    return float(arr[0])


def reduce_atomic(x, op, cfg):
    """Every lane reduces its partition locally, then folds into one shared
    cell via compare-and-swap."""
    arr = _as_flat_f32(x, "reduce_atomic")
    cell = AtomicFloatCell(identity_value(op))
    bounds = _lane_bounds(arr.size, cfg.lanes)

    def worker(bound):
        lo, hi = bound
        if hi > lo:
            _atomic_update(cell, _np_reduce(op, arr[lo:hi]), op, "reduce_atomic")

    if cfg.lanes == 1:
        worker(bounds[0])
    else:
        list(_executor().map(worker, bounds))
    return cell.load()


def reduce_hybrid(x, op, cfg):
    """Tree reduction at the lane level inside each block, atomic combination
    across blocks."""
    arr = _as_flat_f32(x, "reduce_hybrid")
    cell = AtomicFloatCell(identity_value(op))
    t = cfg.threads_per_block
    bounds = _lane_bounds(arr.size, cfg.lanes)

    def run_block(b):
        lane_vals = _block_lane_partials(arr, bounds[b * t : (b + 1) * t], op)
        _atomic_update(cell, block_tree_reduce(lane_vals, op), op, "reduce_hybrid")

    if cfg.num_blocks == 1:
        run_block(0)
    else:
        list(_executor().map(run_block, range(cfg.num_blocks)))
    return cell.load()


def _reduce_atomic_two_level(x, op, cfg):
    """Atomics first at the lane level (per-block cell), then across blocks."""
    arr = _as_flat_f32(x, "reduce_atomic_then_atomic")
    cell = AtomicFloatCell(identity_value(op))
    t = cfg.threads_per_block
    bounds = _lane_bounds(arr.size, cfg.lanes)

    def run_block(b):
        block_cell = AtomicFloatCell(identity_value(op))
        for lo, hi in bounds[b * t : (b + 1) * t]:
            if hi > lo:
                _atomic_update(block_cell, _np_reduce(op, arr[lo:hi]), op, "reduce")
        _atomic_update(cell, block_cell.load(), op, "reduce")

    if cfg.num_blocks == 1:
        run_block(0)
    else:
        list(_executor().map(run_block, range(cfg.num_blocks)))
    return cell.load()


_DISPATCH = {
    Strategy.SEQUENTIAL: lambda x, op, cfg: reduce_sequential(x, op),
    Strategy.PARALLEL_TREE: reduce_parallel_tree,
    Strategy.ATOMIC: reduce_atomic,
    Strategy.HYBRID: reduce_hybrid,
    Strategy.ATOMIC_THEN_ATOMIC: _reduce_atomic_two_level,
}


def reduce(x, op, cfg=None):
    """Reduce with the strategy named in cfg (sequential when cfg is None)."""
    if cfg is None:
        return reduce_sequential(x, op)
    return _DISPATCH[cfg.strategy](x, op, cfg)


def fused_map_reduce(x, elemwise, op, chunk_elems=1 << 16):
    """Single pass producing y = elemwise(x) and reduce(op, y) together.

    The reduction is folded into the pass that materializes each chunk of y,
    so y is never re-read. ``elemwise`` must be vectorized: given a float32
    array chunk it returns an equally-shaped array.
    """
    arr = np.ascontiguousarray(x, dtype=np.float32)
    flat = arr.ravel()
    if flat.size == 0:
        raise InvalidInput("fused_map_reduce: empty tensor")
    out = np.empty(flat.size, dtype=np.float32)
    acc = identity_value(op)
    for lo in range(0, flat.size, chunk_elems):
        hi = min(flat.size, lo + chunk_elems)
        y = np.asarray(elemwise(flat[lo:hi]), dtype=np.float32)
        if y.shape != (hi - lo,):
            raise InvalidInput("fused_map_reduce: elemwise changed the shape")
        out[lo:hi] = y
        acc = _combine(op, acc, _np_reduce(op, y))
    return out.reshape(arr.shape), float(np.float32(acc))


@dataclass(frozen=True)
class ProfileRow:
    min_numel: int
    max_numel: int
    strategy: Strategy


STRATEGY_CONFIGS = {
    Strategy.SEQUENTIAL: None,
    Strategy.PARALLEL_TREE: ReduceConfig(4, 8, Strategy.PARALLEL_TREE),
    Strategy.ATOMIC: ReduceConfig(4, 8, Strategy.ATOMIC),
    Strategy.HYBRID: ReduceConfig(4, 8, Strategy.HYBRID),
    Strategy.ATOMIC_THEN_ATOMIC: ReduceConfig(4, 8, Strategy.ATOMIC_THEN_ATOMIC),
}


def _default_runner(strategy, x, op):
    cfg = STRATEGY_CONFIGS[strategy]
    t0 = time.perf_counter()
    reduce(x, op, cfg)
    return time.perf_counter() - t0


def profile_select_strategy(sizes, repetitions=5, op=ReduceOp.MIN, rng=None, runner=None):
    """Time every strategy per size (median of repetitions) and keep the
    fastest. Returns contiguous ProfileRow buckets over the sorted sizes.

    Every strategy's result is checked against the sequential scan before its
    timing counts; a mismatch aborts the profile.
    """
    if repetitions < 3:
        raise InvalidInput("profile_select_strategy: repetitions must be >= 3")
    if rng is None:
        rng = np.random.default_rng(0)
    if runner is None:
        runner = _default_runner
    rows = []
    lo = 1
    for size in sorted(set(int(s) for s in sizes)):
        x = rng.standard_normal(size).astype(np.float32)
        expect = reduce_sequential(x, op)
        best_strategy = Strategy.SEQUENTIAL
        best_time = math.inf
        for strategy in Strategy:
            cfg = STRATEGY_CONFIGS[strategy]
            if reduce(x, op, cfg) != expect:
                raise InvariantViolation(
                    f"strategy {strategy.value} disagreed with sequential at size {size}"
                )
            med = statistics.median(runner(strategy, x, op) for _ in range(repetitions))
            if med < best_time:
                best_time = med
                best_strategy = strategy
        rows.append(ProfileRow(lo, size, best_strategy))
        lo = size + 1
    return rows


def select_strategy(rows, numel):
    """Strategy for a tensor of numel elements; sequential outside all buckets."""
    for row in rows:
        if row.min_numel <= numel <= row.max_numel:
            return row.strategy
    return Strategy.SEQUENTIAL


def save_profile(rows, path):
    with open(path, "w", encoding="ascii") as fh:
        for row in rows:
            fh.write(f"{row.min_numel}\t{row.max_numel}\t{row.strategy.value}\n")


def load_profile(path):
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise InvalidInput(f"profile line {lineno}: expected 3 fields")
            try:
                rows.append(ProfileRow(int(parts[0]), int(parts[1]), Strategy(parts[2])))
            except ValueError as exc:
                raise InvalidInput(f"profile line {lineno}: {exc}") from exc
    return rows
