"""JSON-lines trace events and synthetic trace generators.

One event per line:

    {"type": "activation", "iter": 0, "act_id": 3, "numel": 200704,
     "time_cost": 200.7, "importance": 1.25}
    {"type": "budget_change", "iter": 10, "mem_bytes": 3145728}
    {"type": "iter_end", "iter": 0}

Events must be ordered by iteration and every act_id must be unique within
its iteration. The bundled traces are synthesized from well-known layer
shapes with seeded randomized importances; they are workload stand-ins, not
measurements.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError

__all__ = [
    "ActivationEvent",
    "BudgetChangeEvent",
    "IterEndEvent",
    "read_trace",
    "write_trace",
    "parse_line",
    "event_to_json",
    "fp32_bytes_per_iteration",
    "resnet18_like_events",
    "transformer_like_events",
    "budget_drop_events",
]


@dataclass(frozen=True)
class ActivationEvent:
    iter: int
    act_id: int
    numel: int
    time_cost: float
    importance: float


@dataclass(frozen=True)
class BudgetChangeEvent:
    iter: int
    mem_bytes: int = None
    time_units: float = None


@dataclass(frozen=True)
class IterEndEvent:
    iter: int


def parse_line(line, lineno):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"trace line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict) or "type" not in obj:
        raise SchemaError(f"trace line {lineno}: missing event type")
    kind = obj["type"]
    try:
        if kind == "activation":
            return ActivationEvent(
                iter=int(obj["iter"]),
                act_id=int(obj["act_id"]),
                numel=int(obj["numel"]),
                time_cost=float(obj["time_cost"]),
                importance=float(obj["importance"]),
            )
        if kind == "budget_change":
            mem = obj.get("mem_bytes")
            tim = obj.get("time_units")
            if mem is None and tim is None:
                raise SchemaError(
                    f"trace line {lineno}: budget_change needs mem_bytes or time_units"
                )
            return BudgetChangeEvent(
                iter=int(obj["iter"]),
                mem_bytes=None if mem is None else int(mem),
                time_units=None if tim is None else float(tim),
            )
        if kind == "iter_end":
            return IterEndEvent(iter=int(obj["iter"]))
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"trace line {lineno}: {exc}") from exc
    raise SchemaError(f"trace line {lineno}: unknown event type {kind!r}")


def read_trace(path):
    """Parse a JSON-lines trace, validating ordering and per-iteration
    act_id uniqueness. Errors name the offending line."""
    events = []
    seen_ids = set()
    current_iter = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            ev = parse_line(line, lineno)
            if ev.iter < current_iter:
                raise SchemaError(f"trace line {lineno}: iteration went backwards")
            if ev.iter > current_iter:
                seen_ids.clear()
                current_iter = ev.iter
            if isinstance(ev, ActivationEvent):
                if ev.act_id in seen_ids:
                    raise SchemaError(
                        f"trace line {lineno}: duplicate act_id {ev.act_id} "
                        f"in iteration {ev.iter}"
                    )
                seen_ids.add(ev.act_id)
            events.append(ev)
    return events


def event_to_json(ev):
    if isinstance(ev, ActivationEvent):
        return json.dumps(
            {
                "type": "activation",
                "iter": ev.iter,
                "act_id": ev.act_id,
                "numel": ev.numel,
                "time_cost": ev.time_cost,
                "importance": ev.importance,
            }
        )
    if isinstance(ev, BudgetChangeEvent):
        obj = {"type": "budget_change", "iter": ev.iter}
        if ev.mem_bytes is not None:
            obj["mem_bytes"] = ev.mem_bytes
        if ev.time_units is not None:
            obj["time_units"] = ev.time_units
        return json.dumps(obj)
    if isinstance(ev, IterEndEvent):
        return json.dumps({"type": "iter_end", "iter": ev.iter})
    raise TypeError(f"not a trace event: {ev!r}")


def write_trace(events, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(event_to_json(ev) + "\n")


def fp32_bytes_per_iteration(events):
    """Total float32 bytes of the activations in the first iteration."""
    first = min((e.iter for e in events if isinstance(e, ActivationEvent)), default=0)
    return sum(
        4 * e.numel
        for e in events
        if isinstance(e, ActivationEvent) and e.iter == first
    )


def _workload(shapes, iterations, seed, time_scale=1e-3):
    """Activation events from a list of numels: per-activation base
    importance (lognormal) times per-iteration jitter, time cost
    proportional to the element count."""
    rng = np.random.default_rng(seed)
    base = rng.lognormal(mean=0.0, sigma=1.0, size=len(shapes))
    events = []
    for it in range(iterations):
        jitter = rng.lognormal(mean=0.0, sigma=0.25, size=len(shapes))
        for act_id, numel in enumerate(shapes):
            events.append(
                ActivationEvent(
                    iter=it,
                    act_id=act_id,
                    numel=int(numel),
                    time_cost=round(float(numel) * time_scale, 6),
                    importance=round(float(base[act_id] * jitter[act_id]), 6),
                )
            )
        events.append(IterEndEvent(iter=it))
    return events


def resnet18_like_numels(batch=6, hw=112):
    """Per-op input-activation element counts of an 18-layer residual
    conv net at the given input resolution: stem (conv/bn/relu/pool), four
    stages of two residual blocks, then pooling and the classifier head.
    54 tensors; at the defaults they total ~44 MB of float32 per iteration.
    """
    s = hw // 2  # stem feature size after the stride-2 conv
    numels = [batch * 3 * hw * hw]  # image into the stem conv
    numels += [batch * 64 * s * s] * 3  # bn/relu/pool inputs at stem width
    dims = [(64, s // 2), (128, s // 4), (256, s // 8), (512, -(-s // 16))]
    prev_c, prev_hw = 64, s // 2
    for stage, (c, fhw) in enumerate(dims):
        for block in range(2):
            in_c, in_hw = (prev_c, prev_hw) if block == 0 else (c, fhw)
            numels.append(batch * in_c * in_hw * in_hw)  # first conv input
            numels += [batch * c * fhw * fhw] * 5  # bn/relu/conv/bn/add-relu
        prev_c, prev_hw = c, fhw
    numels.append(batch * 512 * dims[-1][1] * dims[-1][1])  # global pool input
    numels.append(batch * 512)  # classifier input
    return numels


def resnet18_like_events(iterations=30, seed=7, batch=6, hw=112):
    return _workload(resnet18_like_numels(batch, hw), iterations, seed)


def transformer_like_numels(layers=12, seq=128, width=768):
    """Per-op input-activation element counts of an encoder stack at
    [1, seq, width]: embeddings plus attention in/out, MLP in and the
    4x-wide MLP hidden per layer."""
    tok = seq * width
    numels = [tok]
    for _ in range(layers):
        numels += [tok, tok, tok, 4 * tok]
    return numels


def transformer_like_events(iterations=20, seed=11, layers=12, seq=128, width=768):
    return _workload(transformer_like_numels(layers, seq, width), iterations, seed)


def budget_drop_events(
    iterations=20,
    drop_iter=10,
    start_budget=8 * 1024 * 1024,
    end_budget=3 * 1024 * 1024,
    n_acts=40,
    numel=150_000,
    seed=13,
):
    """Steady workload with one mid-run memory budget drop."""
    rng = np.random.default_rng(seed)
    base = rng.lognormal(mean=0.0, sigma=1.0, size=n_acts)
    events = [BudgetChangeEvent(iter=0, mem_bytes=start_budget)]
    for it in range(iterations):
        if it == drop_iter:
            events.append(BudgetChangeEvent(iter=it, mem_bytes=end_budget))
        jitter = rng.lognormal(mean=0.0, sigma=0.25, size=n_acts)
        for act_id in range(n_acts):
            events.append(
                ActivationEvent(
                    iter=it,
                    act_id=act_id,
                    numel=numel,
                    time_cost=round(numel * 1e-3, 6),
                    importance=round(float(base[act_id] * jitter[act_id]), 6),
                )
            )
        events.append(IterEndEvent(iter=it))
    return events
