"""Command-line front end: trace replay, reduction/codec benchmarks,
reference training, and report generation.

Exit codes: 0 success, 2 input error, 3 invariant violation during a replay
or benchmark.
"""

import argparse
import csv
import io
import json
import math
import sys
import time

import numpy as np

from . import bitcodec, quant, refnet, trace
from . import reduce as red
from ._backend import BACKEND, available_backends
from .errors import DynactError, InvariantViolation, SchemaError
from .policy import Controller, ControllerConfig
from .quant import ImportanceMetric

METRICS_HEADER = ["iter", "mem_used", "capacity", "budget", "ratio",
                  "evictions", "shrinks", "time_used"]


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def cmd_replay(args):
    events = trace.read_trace(args.trace)
    config = ControllerConfig(
        mem_budget=args.mem_budget,
        time_budget=args.time_budget if args.time_budget else math.inf,
        page_size=args.page_size,
        step_bytes=args.step,
        tile_elems=args.tile,
        metric=ImportanceMetric(args.metric),
        uniform_bitwidth=args.uniform_bitwidth,
    )
    controller = Controller(config)
    rows = []
    decisions = []
    tensors = {}

    def tensor_for(act_id, numel):
        t = tensors.get(act_id)
        if t is None or t.size != numel:
            rng = np.random.default_rng((args.seed, act_id))
            t = rng.standard_normal(numel).astype(np.float32)
            tensors[act_id] = t
        return t

    open_iter = False
    for ev in events:
        if isinstance(ev, trace.BudgetChangeEvent):
            if ev.mem_bytes is not None:
                controller.config.mem_budget = ev.mem_bytes
                controller.store.resize_budget(ev.mem_bytes)
            if ev.time_units is not None:
                controller.config.time_budget = ev.time_units
                controller.store.budget.time_budget = ev.time_units
            continue
        if isinstance(ev, trace.ActivationEvent):
            if not open_iter:
                controller.begin_iteration()
                open_iter = True
            decision = controller.store_activation(
                ev.act_id,
                tensor_for(ev.act_id, ev.numel),
                time_cost=ev.time_cost,
                importance=ev.importance,
            )
            decisions.append(
                {
                    "iter": ev.iter,
                    "act_id": ev.act_id,
                    "action": decision.action,
                    "bitwidth": decision.bitwidth,
                    "evictions": decision.evictions,
                    "shrinks": decision.shrinks,
                }
            )
            continue
        if isinstance(ev, trace.IterEndEvent):
            if not open_iter:
                controller.begin_iteration()
            controller.store.check_invariants()
            row = controller.end_iteration()
            row["iter"] = ev.iter
            rows.append(row)
            open_iter = False

    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow([_fmt(row[col]) for col in METRICS_HEADER])
    text = out.getvalue()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.decision_log:
        with open(args.decision_log, "w", encoding="utf-8") as fh:
            for rec in decisions:
                fh.write(json.dumps(rec) + "\n")
    return 0


def cmd_bench_reduce(args):
    sizes = [int(s) for s in args.sizes.split(",") if s]
    rng = np.random.default_rng(args.seed)
    print(f"backend: {BACKEND}")
    print(f"{'numel':>10}  {'strategy':<20} {'median_us':>12}")
    for size in sizes:
        x = rng.standard_normal(size).astype(np.float32)
        expect = red.reduce_sequential(x, red.ReduceOp.MIN)
        for strategy in red.Strategy:
            cfg = red.STRATEGY_CONFIGS[strategy]
            got = red.reduce(x, red.ReduceOp.MIN, cfg)
            if got != expect:
                raise InvariantViolation(
                    f"strategy {strategy.value} returned {got}, expected {expect}"
                )
            times = []
            for _ in range(args.repetitions):
                t0 = time.perf_counter()
                red.reduce(x, red.ReduceOp.MIN, cfg)
                times.append(time.perf_counter() - t0)
            times.sort()
            med = times[len(times) // 2]
            print(f"{size:>10}  {strategy.value:<20} {med * 1e6:>12.1f}")
    if args.out:
        table = red.profile_select_strategy(sizes, args.repetitions, rng=rng)
        red.save_profile(table, args.out)
        print(f"profile table written to {args.out}")
    return 0


def _bench_codec_backend(name, kernels, numel, bitwidths, tile, reps, rng):
    for b in bitwidths:
        vals = rng.integers(0, 1 << b, size=numel, dtype=np.uint32)
        padded_len = -(-numel // tile) * tile
        padded = np.zeros(padded_len, dtype=np.uint32)
        padded[:numel] = vals
        pack_t, unpack_t = [], []
        for _ in range(reps):
            t0 = time.perf_counter()
            words = kernels.pack_groups(padded, b)
            t1 = time.perf_counter()
            out = kernels.unpack_groups(np.asarray(words, np.uint32), b)
            t2 = time.perf_counter()
            pack_t.append(t1 - t0)
            unpack_t.append(t2 - t1)
            if not np.array_equal(np.asarray(out)[:numel], vals):
                raise InvariantViolation(f"round trip failed at bitwidth {b}")
        mb = numel * 4 / 1e6
        bytes_per_elem = (bitcodec.HEADER_SIZE + 4 * len(words)) / numel
        print(
            f"{name:<9} b={b}  pack {mb / min(pack_t):>8.0f} MB/s"
            f"  unpack {mb / min(unpack_t):>8.0f} MB/s"
            f"  {bytes_per_elem:.4f} bytes/elem"
        )


def cmd_bench_codec(args):
    bitwidths = [int(b) for b in args.bitwidths.split(",") if b]
    rng = np.random.default_rng(args.seed)
    backends = available_backends()
    names = list(backends) if args.compare_backends else [
        "compiled" if "compiled" in backends else "python"
    ]
    for name in names:
        _bench_codec_backend(
            name, backends[name], args.numel, bitwidths, args.tile,
            args.repetitions, rng,
        )
    return 0


def cmd_train_ref(args):
    config = refnet.TrainConfig(
        seed=args.seed,
        epochs=args.epochs,
        hidden=args.hidden,
        bitwidth=args.bitwidth,
        metric=ImportanceMetric(args.metric),
    )
    result = refnet.train(config)
    widths = [0, 2, 4, 8, 32]
    lines = ["epoch,fp32_acc,quant_acc," + ",".join(f"n_b{w}" for w in widths)]
    for epoch, (fa, qa) in enumerate(zip(result.fp32_acc, result.quant_acc)):
        hist = result.bitwidth_hist[epoch] if epoch < len(result.bitwidth_hist) else {}
        counts = ",".join(str(hist.get(w, 0)) for w in widths)
        lines.append(f"{epoch},{fa:.6f},{qa:.6f},{counts}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(
        f"final fp32 {result.fp32_acc[-1]:.4f}  "
        f"quant(b={args.bitwidth}) {result.quant_acc[-1]:.4f}",
        file=sys.stderr,
    )
    return 0


def cmd_report(args):
    with open(args.metrics, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError("metrics file is empty (no header)")
        missing = [c for c in METRICS_HEADER if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"metrics file is missing columns: {missing}")
        try:
            rows = [
                {
                    "iter": int(r["iter"]),
                    "mem_used": float(r["mem_used"]),
                    "capacity": float(r["capacity"]),
                    "budget": float(r["budget"]),
                    "ratio": float(r["ratio"]),
                    "evictions": int(r["evictions"]),
                    "shrinks": int(r["shrinks"]),
                    "time_used": float(r["time_used"]),
                }
                for r in reader
            ]
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"bad metrics row: {exc}") from exc
    if not rows:
        print("no iterations")
        return 0
    stored = sum(r["mem_used"] for r in rows)
    fp32 = sum(r["ratio"] * r["mem_used"] for r in rows)
    overall = fp32 / stored if stored else 0.0
    violations = sum(1 for r in rows if r["mem_used"] > r["budget"])
    print(f"iterations: {len(rows)}")
    print(f"compression_ratio: {overall:.2f}")
    print(f"peak_mem_used: {int(max(r['mem_used'] for r in rows))}")
    print(f"final_capacity: {int(rows[-1]['capacity'])}")
    print(f"total_evictions: {sum(r['evictions'] for r in rows)}")
    print(f"total_shrinks: {sum(r['shrinks'] for r in rows)}")
    print(f"mean_time_used: {sum(r['time_used'] for r in rows) / len(rows):.4f}")
    print(f"budget_violations: {violations}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "mem_used_mb", "capacity_mb", "budget_mb", "ratio"])
            for r in rows:
                writer.writerow(
                    [
                        r["iter"],
                        f"{r['mem_used'] / 1e6:.6f}",
                        f"{r['capacity'] / 1e6:.6f}",
                        f"{r['budget'] / 1e6:.6f}",
                        f"{r['ratio']:.6g}",
                    ]
                )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dynact",
        description="Compressed activation storage: replay, benchmarks, training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("replay", help="replay a JSON-lines trace through the store")
    p.add_argument("--trace", required=True, help="trace path (JSON lines)")
    p.add_argument("--mem-budget", type=int, required=True, help="bytes")
    p.add_argument("--time-budget", type=float, default=0.0, help="abstract units; 0 = unbounded")
    p.add_argument("--page-size", type=int, default=4096)
    p.add_argument("--step", type=int, default=None, help="arena grow/shrink step in bytes")
    p.add_argument("--tile", type=int, default=bitcodec.DEFAULT_TILE_ELEMS)
    p.add_argument("--metric", choices=[m.value for m in ImportanceMetric], default="qerr")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="metrics CSV path (stdout otherwise)")
    p.add_argument("--decision-log", default=None, help="JSON-lines decision log path")
    p.add_argument("--uniform-bitwidth", type=int, default=None,
                   help="store everything at this width; disables the ladder and dropping")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("bench-reduce", help="time the reduction strategies")
    p.add_argument("--sizes", default="1,50176,393216", help="comma-separated element counts")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the strategy profile table here")
    p.set_defaults(func=cmd_bench_reduce)

    p = sub.add_parser("bench-codec", help="time pack/unpack throughput")
    p.add_argument("--numel", type=int, default=1_000_000)
    p.add_argument("--bitwidths", default="2,4,8")
    p.add_argument("--tile", type=int, default=bitcodec.DEFAULT_TILE_ELEMS)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compare-backends", action="store_true",
                   help="benchmark the compiled and python backends side by side")
    p.set_defaults(func=cmd_bench_codec)

    p = sub.add_parser("train-ref", help="train the reference MLP with and without storage")
    p.add_argument("--bitwidth", type=int, default=4, choices=[0, 2, 4, 8, 32])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=[m.value for m in ImportanceMetric], default="qerr")
    p.add_argument("--out", default=None, help="accuracy CSV path (stdout otherwise)")
    p.set_defaults(func=cmd_train_ref)

    p = sub.add_parser("report", help="summarize a replay metrics CSV")
    p.add_argument("metrics", help="metrics CSV from `dynact replay`")
    p.add_argument("--out", default=None, help="plot-ready CSV path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3
    except DynactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
