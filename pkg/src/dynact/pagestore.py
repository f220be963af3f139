"""Budget-bounded paged arena for packed activations.

The arena is a contiguous byte block grown and shrunk in fixed steps, carved
into fixed-size pages. Each resident activation owns an ordered span of pages
(not necessarily contiguous; the page indirection keeps external
fragmentation at zero). Two red-black trees index every resident entry by its
importance density:

    mem tree  key = key_importance / size_bytes
    time tree key = key_importance / time_cost

ties broken by activation id. Every mutation updates both trees. Victim
selection returns the entry with the lowest density in the requested tree,
i.e. the least value per byte (or per time unit) spent.
"""

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .errors import (
    InvalidInput,
    InvariantViolation,
    MustEvict,
    NoSpace,
    NotFound,
    NothingToEvict,
)

DEFAULT_PAGE_SIZE = 4096
DEFAULT_STEP_BYTES = 100 * 1024 * 1024

SHRINK_LADDER = (32, 8, 4, 2)


def next_lower_bitwidth(bitwidth):
    """One step down the storage ladder 32 -> 8 -> 4 -> 2; None below 2."""
    try:
        i = SHRINK_LADDER.index(bitwidth)
    except ValueError:
        raise InvalidInput(f"bitwidth {bitwidth} not on the ladder") from None
    return SHRINK_LADDER[i + 1] if i + 1 < len(SHRINK_LADDER) else None


class TreeKind(enum.Enum):
    MEM = "mem"
    TIME = "time"


@dataclass
class ActivationEntry:
    """Per-activation record; the key of both trees.

    key_importance is the numerator currently keying the trees: the moving
    average at insert time, overwritten by the fresh importance when the
    forward pass refreshes the key.
    """

    act_id: int
    bitwidth: int
    size_bytes: int
    time_cost: float
    importance: float
    moving_average: float
    page_span: list = field(default_factory=list)
    key_importance: float = None

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise InvalidInput("size_bytes must be positive")
        if self.time_cost <= 0:
            raise InvalidInput("time_cost must be positive")
        if self.importance < 0 or self.moving_average < 0:
            raise InvalidInput("importance values must be non-negative")
        if self.key_importance is None:
            self.key_importance = self.moving_average

    @property
    def mem_density(self):
        return self.key_importance / self.size_bytes

    @property
    def time_density(self):
        return self.key_importance / self.time_cost


@dataclass
class BudgetState:
    mem_budget: float
    mem_used: int = 0
    time_budget: float = math.inf
    time_used: float = 0.0

    def remaining_fraction(self, kind):
        budget = self.mem_budget if kind is TreeKind.MEM else self.time_budget
        used = self.mem_used if kind is TreeKind.MEM else self.time_used
        if budget <= 0:
            raise InvalidInput("budget must be positive")
        if math.isinf(budget):
            return 1.0
        return (budget - used) / budget


class DualTrees:
    """The mem/time density trees, kept in lockstep."""

    def __init__(self, tree_factory=None):
        factory = tree_factory or kernels.RBTree
        self.mem = factory()
        self.time = factory()

    def __len__(self):
        return len(self.mem)

    def insert(self, entry):
        self.mem.insert(entry.mem_density, entry.act_id)
        self.time.insert(entry.time_density, entry.act_id)

    def remove(self, entry):
        # entry must still carry the keys it was inserted with
        self.mem.remove(entry.mem_density, entry.act_id)
        self.time.remove(entry.time_density, entry.act_id)

    def tree(self, kind):
        return self.mem if kind is TreeKind.MEM else self.time

    def min_item(self, kind):
        t = self.tree(kind)
        if len(t) == 0:
            return None
        return t.min_item()

    def ids_in_order(self, kind):
        return [ident for _, ident in self.tree(kind)]


def first_fit(free_pages, n_pages):
    """Lowest-indexed run of >= n contiguous free pages if one exists, else
    the n lowest-indexed free pages. Raises NoSpace when fewer than n pages
    are free."""
    free = np.asarray(free_pages, dtype=bool)
    if n_pages <= 0:
        return []
    idx = np.flatnonzero(free)
    if idx.size < n_pages:
        raise NoSpace(f"need {n_pages} pages, {idx.size} free")
    if n_pages == 1:
        return [int(idx[0])]
    span = idx[n_pages - 1 :] - idx[: idx.size - n_pages + 1]
    runs = np.flatnonzero(span == n_pages - 1)
    if runs.size:
        start = int(idx[runs[0]])
        return list(range(start, start + n_pages))
    return [int(i) for i in idx[:n_pages]]


_SNAP_MAGIC = b"DAFS"
_SNAP_HEAD = struct.Struct("<4sBxxxIQQQdQQQI")
_SNAP_ENTRY = struct.Struct("<qBxxxQddddI")


class PageStore:
    """Paged arena + dual trees + budget accounting.

    Mutating operations require external synchronization (single writer);
    stats() is safe to call concurrently with readers.
    """

    def __init__(
        self,
        mem_budget,
        *,
        page_size=DEFAULT_PAGE_SIZE,
        step_bytes=None,
        time_budget=math.inf,
        tree_factory=None,
    ):
        if page_size <= 0:
            raise InvalidInput("page_size must be positive")
        if step_bytes is None:
            step_bytes = min(DEFAULT_STEP_BYTES, (mem_budget // page_size) * page_size)
        if step_bytes <= 0 or step_bytes % page_size != 0:
            raise InvalidInput("step_bytes must be a positive multiple of page_size")
        if step_bytes > mem_budget:
            raise InvalidInput("step_bytes must not exceed the memory budget")
        self.page_size = int(page_size)
        self.step_bytes = int(step_bytes)
        self.budget = BudgetState(mem_budget=int(mem_budget), time_budget=time_budget)
        self._tree_factory = tree_factory
        self._pages = np.zeros(self.step_bytes, dtype=np.uint8)
        self._free = np.ones(self.step_bytes // self.page_size, dtype=bool)
        self.trees = DualTrees(tree_factory)
        self.entries = {}
        self.evictions = 0
        self.shrinks = 0
        self.grows = 0

    # -- geometry ----------------------------------------------------------

    @property
    def capacity_bytes(self):
        return self._pages.size

    @property
    def total_pages(self):
        return self._free.size

    @property
    def free_page_count(self):
        return int(self._free.sum())

    @property
    def mem_used(self):
        return self.budget.mem_used

    @property
    def time_used(self):
        return self.budget.time_used

    def pages_needed(self, size_bytes):
        return -(-size_bytes // self.page_size)

    def _grow_one_step(self):
        new_cap = self.capacity_bytes + self.step_bytes
        if new_cap > self.budget.mem_budget:
            return False
        self._pages = np.concatenate(
            [self._pages, np.zeros(self.step_bytes, dtype=np.uint8)]
        )
        self._free = np.concatenate(
            [self._free, np.ones(self.step_bytes // self.page_size, dtype=bool)]
        )
        self.grows += 1
        return True

    # -- page IO -----------------------------------------------------------

    def _write_span(self, span, payload):
        ps = self.page_size
        for k, page in enumerate(span):
            chunk = payload[k * ps : (k + 1) * ps]
            start = page * ps
            self._pages[start : start + len(chunk)] = np.frombuffer(chunk, np.uint8)
            if len(chunk) < ps:  # canonical zero tail in the last page
                self._pages[start + len(chunk) : start + ps] = 0

    def _read_span(self, span, size_bytes):
        ps = self.page_size
        out = bytearray()
        for page in span:
            out += self._pages[page * ps : (page + 1) * ps].tobytes()
        return bytes(out[:size_bytes])

    # -- core operations ----------------------------------------------------

    def contains(self, act_id):
        return act_id in self.entries

    def insert(self, entry, payload):
        """Place payload into first-fit pages, growing the arena in steps up
        to the budget; registers the entry in both trees."""
        if entry.act_id in self.entries:
            raise InvalidInput(f"activation {entry.act_id} already resident")
        payload = bytes(payload)
        if len(payload) != entry.size_bytes:
            raise InvalidInput(
                f"payload is {len(payload)} bytes, entry claims {entry.size_bytes}"
            )
        n = self.pages_needed(entry.size_bytes)
        while True:
            try:
                span = first_fit(self._free, n)
                break
            except NoSpace:
                if not self._grow_one_step():
                    raise
        self._write_span(span, payload)
        self._free[span] = False
        entry.page_span = list(span)
        self.entries[entry.act_id] = entry
        self.trees.insert(entry)
        self.budget.mem_used += entry.size_bytes
        self.budget.time_used += entry.time_cost
        return list(span)

    def get_payload(self, act_id):
        entry = self.entries.get(act_id)
        if entry is None:
            raise NotFound(act_id)
        return self._read_span(entry.page_span, entry.size_bytes)

    def get_entry(self, act_id):
        entry = self.entries.get(act_id)
        if entry is None:
            raise NotFound(act_id)
        return entry

    def _release_entry(self, entry):
        self.trees.remove(entry)
        self._free[entry.page_span] = True
        del self.entries[entry.act_id]
        self.budget.mem_used -= entry.size_bytes
        self.budget.time_used -= entry.time_cost

    def evict(self, act_id):
        """Forced removal; returns the freed byte count."""
        entry = self.entries.get(act_id)
        if entry is None:
            raise NotFound(act_id)
        self._release_entry(entry)
        self.evictions += 1
        return entry.size_bytes

    def release(self, act_id):
        """Consume an entry (backward pass took it); not counted as eviction."""
        entry = self.entries.get(act_id)
        if entry is None:
            raise NotFound(act_id)
        self._release_entry(entry)
        return entry.size_bytes

    def release_all(self):
        for act_id in list(self.entries):
            self.release(act_id)

    def update_size(self, act_id, new_payload, new_bitwidth):
        """Re-store an entry at a strictly lower bit-width, releasing surplus
        pages and re-keying the mem tree."""
        entry = self.entries.get(act_id)
        if entry is None:
            raise NotFound(act_id)
        if next_lower_bitwidth(entry.bitwidth) is None:
            raise MustEvict(f"activation {act_id} is already at the minimum bit-width")
        if new_bitwidth not in (2, 4, 8) or new_bitwidth >= entry.bitwidth:
            raise InvalidInput(
                f"new bitwidth {new_bitwidth} must be a packable width below "
                f"{entry.bitwidth}"
            )
        new_payload = bytes(new_payload)
        if len(new_payload) > entry.size_bytes:
            raise InvalidInput("shrunk payload is larger than the original")
        old_size = entry.size_bytes
        self.trees.remove(entry)
        self._free[entry.page_span] = True
        entry.bitwidth = new_bitwidth
        entry.size_bytes = len(new_payload)
        span = first_fit(self._free, self.pages_needed(entry.size_bytes))
        self._write_span(span, new_payload)
        self._free[span] = False
        entry.page_span = list(span)
        self.trees.insert(entry)
        self.budget.mem_used -= old_size - entry.size_bytes
        self.shrinks += 1
        return list(span)

    def update_key(self, act_id, fresh_importance):
        """Re-key both trees with a fresh importance value."""
        entry = self.entries.get(act_id)
        if entry is None:
            raise NotFound(act_id)
        if fresh_importance < 0:
            raise InvalidInput("importance must be non-negative")
        self.trees.remove(entry)
        entry.importance = fresh_importance
        entry.key_importance = fresh_importance
        self.trees.insert(entry)

    def select_victim(self, kind=TreeKind.MEM):
        """Resident activation with the lowest density in the given tree;
        ties go to the smaller act_id."""
        item = self.trees.min_item(kind)
        if item is None:
            raise NothingToEvict("store is empty")
        return item[1]

    # -- budget resizing -----------------------------------------------------

    def resize_budget(self, new_budget):
        """Adjust the budget. Decreases release capacity step by step down to
        the largest step multiple within the new budget, evicting the lowest
        mem-density entries until survivors fit and relocating pages out of
        each released region. Increases only raise the growth ceiling."""
        if new_budget < self.step_bytes:
            raise InvalidInput("budget below one step")
        self.budget.mem_budget = int(new_budget)
        actions = []
        target = (int(new_budget) // self.step_bytes) * self.step_bytes
        while self.capacity_bytes > target:
            actions.extend(self._release_top_step())
        return actions

    def _used_page_count(self):
        return self.total_pages - self.free_page_count

    def _release_top_step(self):
        actions = []
        new_pages = (self.capacity_bytes - self.step_bytes) // self.page_size
        while self._used_page_count() > new_pages:
            victim = self.select_victim(TreeKind.MEM)
            self.evict(victim)
            actions.append(("evict", victim))
        if new_pages:
            owner = {}
            for entry in self.entries.values():
                for pos, page in enumerate(entry.page_span):
                    owner[page] = (entry.act_id, pos)
            for page in range(new_pages, self.total_pages):
                if self._free[page]:
                    continue
                act_id, pos = owner[page]
                dest = int(np.flatnonzero(self._free[:new_pages])[0])
                ps = self.page_size
                self._pages[dest * ps : (dest + 1) * ps] = self._pages[
                    page * ps : (page + 1) * ps
                ]
                self._free[dest] = False
                self._free[page] = True
                self.entries[act_id].page_span[pos] = dest
                actions.append(("relocate", act_id, page, dest))
        self._pages = self._pages[: new_pages * self.page_size].copy()
        self._free = self._free[:new_pages].copy()
        return actions

    # -- reporting & checks ---------------------------------------------------

    def internal_frag_bytes(self):
        ps = self.page_size
        return sum(len(e.page_span) * ps - e.size_bytes for e in self.entries.values())

    def stats(self):
        return {
            "mem_used": self.budget.mem_used,
            "capacity": self.capacity_bytes,
            "budget": self.budget.mem_budget,
            "free_pages": self.free_page_count,
            "internal_frag_bytes": self.internal_frag_bytes(),
            "evictions": self.evictions,
            "shrinks": self.shrinks,
        }

    def check_invariants(self):
        """Full consistency audit; raises InvariantViolation on any failure."""
        if self.capacity_bytes % self.step_bytes or self.capacity_bytes % self.page_size:
            raise InvariantViolation("capacity is not step/page aligned")
        if self.capacity_bytes > self.budget.mem_budget:
            raise InvariantViolation("capacity exceeds the budget")
        if self.budget.mem_used > self.budget.mem_budget:
            raise InvariantViolation("mem_used exceeds the budget")
        seen = {}
        for entry in self.entries.values():
            if len(entry.page_span) != self.pages_needed(entry.size_bytes):
                raise InvariantViolation(f"span size mismatch for {entry.act_id}")
            for page in entry.page_span:
                if not 0 <= page < self.total_pages:
                    raise InvariantViolation(f"page {page} out of range")
                if page in seen:
                    raise InvariantViolation(f"page {page} owned twice")
                if self._free[page]:
                    raise InvariantViolation(f"page {page} owned but marked free")
                seen[page] = entry.act_id
        if len(seen) + self.free_page_count != self.total_pages:
            raise InvariantViolation("free bitmap and spans do not partition pages")
        if self.budget.mem_used != sum(e.size_bytes for e in self.entries.values()):
            raise InvariantViolation("mem_used out of sync")
        ids = sorted(self.entries)
        for kind in TreeKind:
            in_tree = sorted(self.trees.ids_in_order(kind))
            if in_tree != ids:
                raise InvariantViolation(f"{kind.value} tree id set out of sync")
        for tree in (self.trees.mem, self.trees.time):
            if hasattr(tree, "validate"):
                tree.validate()
            n = len(tree)
            if n and hasattr(tree, "height"):
                if tree.height() > 2 * math.log2(n + 1):
                    raise InvariantViolation("tree height exceeds the red-black bound")

    # -- debug snapshot --------------------------------------------------------

    def save_snapshot(self, path):
        """Debug dump: header + page table + raw page bytes."""
        with open(path, "wb") as fh:
            fh.write(
                _SNAP_HEAD.pack(
                    _SNAP_MAGIC,
                    1,
                    self.page_size,
                    self.capacity_bytes,
                    self.budget.mem_budget,
                    self.step_bytes,
                    self.budget.time_budget,
                    self.evictions,
                    self.shrinks,
                    self.grows,
                    len(self.entries),
                )
            )
            for act_id in sorted(self.entries):
                e = self.entries[act_id]
                fh.write(
                    _SNAP_ENTRY.pack(
                        e.act_id,
                        e.bitwidth,
                        e.size_bytes,
                        e.time_cost,
                        e.importance,
                        e.moving_average,
                        e.key_importance,
                        len(e.page_span),
                    )
                )
                fh.write(np.asarray(e.page_span, dtype="<u4").tobytes())
            fh.write(self._pages.tobytes())

    @classmethod
    def load_snapshot(cls, path, tree_factory=None):
        with open(path, "rb") as fh:
            head = fh.read(_SNAP_HEAD.size)
            if len(head) < _SNAP_HEAD.size:
                raise InvalidInput("truncated snapshot header")
            (magic, version, page_size, capacity, budget, step, time_budget,
             evictions, shrinks, grows, n_entries) = _SNAP_HEAD.unpack(head)
            if magic != _SNAP_MAGIC or version != 1:
                raise InvalidInput("not a dynact snapshot")
            store = cls(
                budget,
                page_size=page_size,
                step_bytes=step,
                time_budget=time_budget,
                tree_factory=tree_factory,
            )
            entries = []
            for _ in range(n_entries):
                raw = fh.read(_SNAP_ENTRY.size)
                (act_id, bitwidth, size_bytes, time_cost, importance,
                 ma, key_imp, span_len) = _SNAP_ENTRY.unpack(raw)
                span = np.frombuffer(fh.read(4 * span_len), dtype="<u4").tolist()
                entries.append(
                    ActivationEntry(
                        act_id=act_id,
                        bitwidth=bitwidth,
                        size_bytes=size_bytes,
                        time_cost=time_cost,
                        importance=importance,
                        moving_average=ma,
                        page_span=span,
                        key_importance=key_imp,
                    )
                )
            pages = np.frombuffer(fh.read(capacity), dtype=np.uint8).copy()
        while store.capacity_bytes < capacity:
            if not store._grow_one_step():
                raise InvalidInput("snapshot capacity exceeds its budget")
        store._pages = pages
        store._free = np.ones(capacity // page_size, dtype=bool)
        for entry in entries:
            store._free[entry.page_span] = False
            store.entries[entry.act_id] = entry
            store.trees.insert(entry)
            store.budget.mem_used += entry.size_bytes
            store.budget.time_used += entry.time_cost
        store.evictions = evictions
        store.shrinks = shrinks
        store.grows = grows
        return store
