"""Compressed activation storage for training under memory and time budgets.

Activation tensors are quantized to dynamic bit-widths, packed bit-exactly
into 32-bit words, and parked in a budget-bounded paged arena indexed by dual
red-black trees, so a greedy controller can shrink or evict the least
valuable entries when either budget tightens. A trace-driven replay CLI and
a reference MLP exercise the whole stack.
"""

from ._backend import BACKEND, available_backends
from .bitcodec import (
    DEFAULT_TILE_ELEMS,
    LayoutCoord,
    PackedBuffer,
    deserialize,
    float_to_uint_bits,
    layout_coord,
    pack,
    packed_size_bytes,
    serialize,
    uint_bits_to_float,
    unpack,
)
from .errors import (
    CorruptData,
    DynactError,
    InvalidInput,
    InvariantViolation,
    MustEvict,
    NoSpace,
    NotFound,
    NothingToEvict,
    SchemaError,
    StoreRejected,
    TrainingDiverged,
)
from .pagestore import (
    ActivationEntry,
    BudgetState,
    DualTrees,
    PageStore,
    TreeKind,
    first_fit,
    next_lower_bitwidth,
)
from .policy import (
    ActivationDescriptor,
    Controller,
    ControllerConfig,
    Decision,
    Plan,
    choose_bitwidth,
    pre_iteration_plan,
    tighter_constraint,
)
from .quant import (
    ImportanceMetric,
    ImportanceState,
    QuantParams,
    compute_qparams,
    dequantize,
    ema_update,
    importance,
    quantize,
)
from .reduce import (
    AtomicFloatCell,
    ReduceConfig,
    ReduceOp,
    Strategy,
    atomic_max_float,
    atomic_min_float,
    fused_map_reduce,
    profile_select_strategy,
    reduce_atomic,
    reduce_hybrid,
    reduce_parallel_tree,
    reduce_sequential,
)
from .reduce import reduce as collective_reduce

__version__ = "0.1.0"
