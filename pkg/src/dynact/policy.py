"""Dynamic activation storage control.

Greedy selection under dual budgets: keep the stored set's total importance
high by always sacrificing the entry with the lowest importance density in
whichever budget (memory or time) has the smaller remaining proportion.
Planning before an iteration uses moving-average importances; the forward
pass refreshes keys with the observed importance of each arriving activation
and enforces the budgets before placing it.

Shrinking (one step down the bit-width ladder) is preferred over eviction
only when memory is the tighter constraint and the candidate has not been
physically stored yet this iteration; everything else is evicted.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import bitcodec, quant
from .errors import InvalidInput, NoSpace, StoreRejected
from .pagestore import (
    ActivationEntry,
    BudgetState,
    DualTrees,
    PageStore,
    TreeKind,
    next_lower_bitwidth,
)


def tighter_constraint(budget):
    """MEM iff memory's remaining budget proportion is <= time's; ties MEM."""
    mem = budget.remaining_fraction(TreeKind.MEM)
    tim = budget.remaining_fraction(TreeKind.TIME)
    return TreeKind.MEM if mem <= tim else TreeKind.TIME


def choose_bitwidth(rank_fraction, headroom_fraction):
    """Default importance-to-bit-width ladder.

    rank_fraction: 0.0 = highest importance density among this iteration's
    activations, 1.0 = lowest. headroom_fraction: remaining memory budget
    divided by the fp32 byte size of the activations to place.

    Top quartile gets 8 bits, the middle half 4, the bottom quartile 2, all
    capped by the widest width whose packed size fits the headroom. No
    headroom stores nothing; headroom covering full fp32 promotes all to 8.
    """
    if headroom_fraction <= 0.0:
        return 0
    if headroom_fraction >= 1.0:
        return 8
    if rank_fraction < 0.25:
        b = 8
    elif rank_fraction < 0.75:
        b = 4
    else:
        b = 2
    cap = 2
    for c in (8, 4):
        if c / 32.0 <= headroom_fraction:
            cap = c
            break
    return min(b, cap)


@dataclass
class ActivationDescriptor:
    """What planning knows about one activation before it arrives."""

    act_id: int
    numel: int
    time_cost: float
    moving_average: float
    bitwidth: int = 4  # width to plan at (normally the previous iteration's)


@dataclass
class Plan:
    """Planned per-activation bit-widths plus the predicted budget usage."""

    bitwidths: dict
    predicted_mem: int
    predicted_time: float


@dataclass
class Decision:
    """Outcome for one arriving activation, including forced side effects."""

    action: str  # "store" | "skip"
    bitwidth: int
    evictions: list = field(default_factory=list)
    shrinks: list = field(default_factory=list)  # (act_id, new_bitwidth)


class _PlannedSet:
    """Unallocated (planned) entries tracked with the same dual-tree
    machinery the store uses, so victim selection can span both."""

    def __init__(self, tile_elems, tree_factory=None):
        self.tile_elems = tile_elems
        self.trees = DualTrees(tree_factory)
        self.entries = {}
        self.mem_total = 0
        self.time_total = 0.0

    def __contains__(self, act_id):
        return act_id in self.entries

    def __len__(self):
        return len(self.entries)

    def _size_of(self, numel, bitwidth):
        return bitcodec.packed_size_bytes(numel, bitwidth, self.tile_elems)

    def add(self, act_id, numel, time_cost, bitwidth, key_importance, moving_average):
        size = self._size_of(numel, bitwidth)
        entry = ActivationEntry(
            act_id=act_id,
            bitwidth=bitwidth,
            size_bytes=size,
            time_cost=time_cost,
            importance=key_importance,
            moving_average=moving_average,
            key_importance=key_importance,
        )
        entry.numel = numel
        self.entries[act_id] = entry
        self.trees.insert(entry)
        self.mem_total += size
        self.time_total += time_cost

    def update_key(self, act_id, fresh_importance):
        entry = self.entries[act_id]
        self.trees.remove(entry)
        entry.importance = fresh_importance
        entry.key_importance = fresh_importance
        self.trees.insert(entry)

    def shrink(self, act_id):
        """One ladder step down; returns the new width, or None when the
        entry sat at the minimum width and was dropped instead."""
        entry = self.entries[act_id]
        nb = next_lower_bitwidth(entry.bitwidth)
        if nb is None:
            self.drop(act_id)
            return None
        new_size = self._size_of(entry.numel, nb)
        self.trees.remove(entry)
        self.mem_total -= entry.size_bytes - new_size
        entry.bitwidth = nb
        entry.size_bytes = new_size
        self.trees.insert(entry)
        return nb

    def drop(self, act_id):
        entry = self.entries.pop(act_id)
        self.trees.remove(entry)
        self.mem_total -= entry.size_bytes
        self.time_total -= entry.time_cost

    def bitwidth(self, act_id):
        return self.entries[act_id].bitwidth

    def min_item(self, kind):
        return self.trees.min_item(kind)


def pre_iteration_plan(
    descriptors,
    mem_budget,
    time_budget=math.inf,
    tile_elems=bitcodec.DEFAULT_TILE_ELEMS,
    tree_factory=None,
):
    """Insert every activation at its planned width keyed by moving-average
    density, enforcing both budgets after each insertion: while over budget,
    shrink the lowest-density candidate when memory is tighter, evict it when
    time is. Always terminates feasibly (worst case: everything dropped)."""
    descriptors = list(descriptors)
    if mem_budget <= 0 or time_budget <= 0:
        return Plan({d.act_id: 0 for d in descriptors}, 0, 0.0)
    planned = _PlannedSet(tile_elems, tree_factory)
    widths = {}
    for d in descriptors:
        b = d.bitwidth if d.bitwidth in (2, 4, 8, 32) else 4
        planned.add(d.act_id, d.numel, d.time_cost, b, d.moving_average, d.moving_average)
        while planned.mem_total > mem_budget or planned.time_total > time_budget:
            state = BudgetState(
                mem_budget=mem_budget,
                mem_used=planned.mem_total,
                time_budget=time_budget,
                time_used=planned.time_total,
            )
            kind = tighter_constraint(state)
            _, victim = planned.min_item(kind)
            if kind is TreeKind.MEM:
                if planned.shrink(victim) is None:
                    widths[victim] = 0
            else:
                planned.drop(victim)
                widths[victim] = 0
    for act_id, entry in planned.entries.items():
        widths[act_id] = entry.bitwidth
    return Plan(widths, planned.mem_total, planned.time_total)


@dataclass
class ControllerConfig:
    mem_budget: int
    time_budget: float = math.inf
    page_size: int = 4096
    step_bytes: int = None
    tile_elems: int = bitcodec.DEFAULT_TILE_ELEMS
    metric: quant.ImportanceMetric = quant.ImportanceMetric.QUANT_ERROR
    decay: float = 0.9
    uniform_bitwidth: int = None  # fixed width; ladder and eviction disabled
    ladder: object = choose_bitwidth  # pluggable rank/headroom -> bitwidth

    def __post_init__(self):
        # the shrink ladder can take any entry down to 2 bits, so the tile
        # must frame cleanly at every packable width
        for b in bitcodec.PACKABLE_BITWIDTHS:
            bitcodec.check_tile_elems(self.tile_elems, b)
        if self.uniform_bitwidth is not None and self.uniform_bitwidth not in (
            0, 2, 4, 8, 32,
        ):
            raise InvalidInput(f"uniform_bitwidth {self.uniform_bitwidth} not storable")


@dataclass
class _ActHistory:
    numel: int
    time_cost: float
    state: quant.ImportanceState
    last_bitwidth: int


class Controller:
    """Drives a PageStore through training iterations.

    Owns the moving-average history, the pre-iteration plan, and the
    forward-pass decision loop. Call begin_iteration(), then
    store_activation() per arriving tensor, then end_iteration() to collect
    metrics and release the consumed entries.
    """

    def __init__(self, config, store=None, tree_factory=None):
        self.config = config
        self.store = store or PageStore(
            config.mem_budget,
            page_size=config.page_size,
            step_bytes=config.step_bytes,
            time_budget=config.time_budget,
            tree_factory=tree_factory,
        )
        self._tree_factory = tree_factory
        self.history = {}
        self.plan = Plan({}, 0, 0.0)
        self.iteration = -1
        self._planned = _PlannedSet(config.tile_elems, tree_factory)
        self._reset_iteration_state()

    def _reset_iteration_state(self):
        self.peak_mem_used = 0
        self.peak_time_used = 0.0
        self.fp32_bytes = 0
        self.evictions_at_start = self.store.evictions
        self.shrinks_at_start = self.store.shrinks
        self.plan_shrinks = 0

    # -- iteration lifecycle -------------------------------------------------

    def begin_iteration(self):
        """Plan the iteration from moving averages of previously seen
        activations; returns the Plan."""
        self.iteration += 1
        self._reset_iteration_state()
        self._planned = _PlannedSet(self.config.tile_elems, self._tree_factory)
        if self.config.uniform_bitwidth is not None:
            widths = {
                act_id: self.config.uniform_bitwidth for act_id in sorted(self.history)
            }
            self.plan = Plan(widths, 0, 0.0)
            return self.plan
        descriptors = [
            ActivationDescriptor(
                act_id=act_id,
                numel=h.numel,
                time_cost=h.time_cost,
                moving_average=h.state.moving_average,
                bitwidth=h.last_bitwidth if h.last_bitwidth != 0 else 4,
            )
            for act_id, h in sorted(self.history.items())
        ]
        self.plan = pre_iteration_plan(
            descriptors,
            self.config.mem_budget,
            self.config.time_budget,
            self.config.tile_elems,
            self._tree_factory,
        )
        for d in descriptors:
            b = self.plan.bitwidths[d.act_id]
            if b != 0:
                self._planned.add(
                    d.act_id, d.numel, d.time_cost, b, d.moving_average, d.moving_average
                )
        return self.plan

    def end_iteration(self):
        """Release every resident entry (the backward pass consumed them) and
        return the iteration's metrics row."""
        self._note_usage()
        stats = self.store.stats()
        row = {
            "iter": self.iteration,
            "mem_used": self.peak_mem_used,
            "capacity": stats["capacity"],
            "budget": stats["budget"],
            "fp32_bytes": self.fp32_bytes,
            "ratio": (self.fp32_bytes / self.peak_mem_used) if self.peak_mem_used else 0.0,
            "evictions": self.store.evictions - self.evictions_at_start,
            "shrinks": (self.store.shrinks - self.shrinks_at_start) + self.plan_shrinks,
            "time_used": self.peak_time_used,
        }
        self.store.release_all()
        return row

    def _note_usage(self):
        self.peak_mem_used = max(self.peak_mem_used, self.store.mem_used)
        self.peak_time_used = max(self.peak_time_used, self.store.time_used)

    # -- forward pass ----------------------------------------------------------

    def _target_bitwidth(self, act_id, numel, importance):
        if self.config.uniform_bitwidth is not None:
            return self.config.uniform_bitwidth
        if act_id in self.plan.bitwidths:
            return self.plan.bitwidths[act_id]
        # unseen activation: rank its fresh density among the latest observed
        # densities of the others. Headroom is judged against the whole
        # budget; scarcity is settled by the enforcement loop, where the
        # newcomer competes on density.
        headroom = self.config.mem_budget / max(4 * numel, 1)
        if not self.history or len(self.history) == 1:
            return self.config.ladder(0.5, headroom)
        mine = importance / (4 * numel)
        others = [
            h.state.current / (4 * h.numel)
            for aid, h in self.history.items()
            if aid != act_id
        ]
        rank = sum(1 for d in others if d > mine) / len(others)
        return self.config.ladder(rank, headroom)

    def on_activation(self, act_id, numel, time_cost, importance):
        """Refresh the arriving activation's tree keys with its fresh
        importance, enforce both budgets by shrinking/evicting lowest-density
        candidates, and decide store-vs-skip for the newcomer."""
        if importance < 0:
            raise InvalidInput("importance must be non-negative")
        if time_cost <= 0:
            raise InvalidInput("time_cost must be positive")
        if self.store.contains(act_id):
            raise InvalidInput(f"activation {act_id} already stored this iteration")
        hist = self.history.get(act_id)
        if hist is None:
            hist = _ActHistory(
                numel=numel,
                time_cost=time_cost,
                state=quant.ImportanceState(decay=self.config.decay),
                last_bitwidth=4,
            )
            self.history[act_id] = hist
        hist.numel = numel
        hist.time_cost = time_cost
        hist.state = quant.ema_update(hist.state, importance)

        target = self._target_bitwidth(act_id, numel, importance)
        if self.config.uniform_bitwidth is not None:
            hist.last_bitwidth = target
            return Decision("store" if target else "skip", target)

        if act_id in self._planned:
            self._planned.update_key(act_id, importance)
        elif target != 0:
            self._planned.add(
                act_id, numel, time_cost, target, importance, hist.state.moving_average
            )
        else:
            hist.last_bitwidth = 0
            return Decision("skip", 0)

        decision = self._enforce_budgets(act_id)
        if act_id not in self._planned:
            hist.last_bitwidth = 0
            decision.action = "skip"
            decision.bitwidth = 0
        else:
            decision.action = "store"
            decision.bitwidth = self._planned.bitwidth(act_id)
            hist.last_bitwidth = decision.bitwidth
        return decision

    def _enforce_budgets(self, incoming_id):
        """Shrink/evict lowest-density candidates until allocated plus
        planned usage fits both budgets. The arriving activation competes
        like everyone else and may itself be demoted or dropped."""
        decision = Decision("store", 0)
        cfg = self.config
        while True:
            used_mem = self.store.mem_used + self._planned.mem_total
            used_time = self.store.time_used + self._planned.time_total
            if used_mem <= cfg.mem_budget and used_time <= cfg.time_budget:
                return decision
            state = BudgetState(
                mem_budget=cfg.mem_budget,
                mem_used=used_mem,
                time_budget=cfg.time_budget,
                time_used=used_time,
            )
            kind = tighter_constraint(state)
            stored_min = self.store.trees.min_item(kind)
            planned_min = self._planned.min_item(kind)
            if stored_min is None and planned_min is None:
                return decision
            if planned_min is not None and (stored_min is None or planned_min <= stored_min):
                victim, unallocated = planned_min[1], True
            else:
                victim, unallocated = stored_min[1], False
            if unallocated and kind is TreeKind.MEM:
                nb = self._planned.shrink(victim)
                if nb is None:
                    if victim != incoming_id:
                        decision.evictions.append(victim)
                        self.plan.bitwidths[victim] = 0
                else:
                    decision.shrinks.append((victim, nb))
                    self.plan_shrinks += 1
                    if victim != incoming_id:
                        self.plan.bitwidths[victim] = nb
            elif unallocated:
                self._planned.drop(victim)
                if victim != incoming_id:
                    decision.evictions.append(victim)
                    self.plan.bitwidths[victim] = 0
            else:
                self.store.evict(victim)
                decision.evictions.append(victim)

    # -- storage helpers ---------------------------------------------------------

    def store_activation(self, act_id, x, time_cost=None, importance=None):
        """Full path for one tensor: score it, run the decision loop, then
        quantize/pack/insert on a store decision. Returns the Decision."""
        arr = np.ascontiguousarray(x, dtype=np.float32)
        numel = arr.size
        if time_cost is None:
            time_cost = float(numel)
        if importance is None:
            importance = quant.importance(arr, self.config.metric)
        self.fp32_bytes += 4 * numel
        decision = self.on_activation(act_id, numel, time_cost, importance)
        if decision.action == "store":
            if not self._insert_payload(act_id, arr, decision, time_cost, importance):
                decision.action = "skip"
                decision.bitwidth = 0
                self.history[act_id].last_bitwidth = 0
        self._note_usage()
        return decision

    def _insert_payload(self, act_id, arr, decision, time_cost, importance):
        b = decision.bitwidth
        if b == 32:
            payload = arr.astype("<f4").tobytes()
        else:
            params = quant.compute_qparams(arr, b)
            buf = bitcodec.pack(quant.quantize(arr, params), params, self.config.tile_elems)
            payload = bitcodec.serialize(buf)
        entry = ActivationEntry(
            act_id=act_id,
            bitwidth=b,
            size_bytes=len(payload),
            time_cost=time_cost,
            importance=importance,
            moving_average=self.history[act_id].state.moving_average,
            key_importance=importance,
        )
        try:
            self.store.insert(entry, payload)
        except NoSpace as exc:
            # page-granularity slack can reject what byte accounting admitted
            if self.config.uniform_bitwidth is not None:
                raise StoreRejected(str(exc)) from exc
            if act_id in self._planned:
                self._planned.drop(act_id)
            return False
        if act_id in self._planned:
            self._planned.drop(act_id)  # its usage is now counted by the store
        return True

    def fetch_tensor(self, act_id, shape):
        """Dequantized stored activation, or None when it was skipped or has
        been evicted since."""
        if not self.store.contains(act_id):
            return None
        entry = self.store.get_entry(act_id)
        payload = self.store.get_payload(act_id)
        if entry.bitwidth == 32:
            return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        buf = bitcodec.deserialize(payload)
        params = quant.QuantParams(buf.bitwidth, buf.qmin, buf.qscale)
        return quant.dequantize(bitcodec.unpack(buf), params).reshape(shape)
