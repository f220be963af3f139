import csv
import importlib.resources
import io
import json
import math
from contextlib import redirect_stdout

import numpy as np
import pytest

from dynact import cli, trace
from dynact.errors import SchemaError


def bundled(name):
    return importlib.resources.files("dynact") / "traces" / name


class TestTraceParsing:
    def test_parse_activation_line(self):
        ev = trace.parse_line(
            '{"type":"activation","iter":0,"act_id":3,"numel":100,'
            '"time_cost":1.5,"importance":0.25}',
            1,
        )
        assert ev == trace.ActivationEvent(0, 3, 100, 1.5, 0.25)

    def test_error_names_the_line(self):
        with pytest.raises(SchemaError, match="line 7"):
            trace.parse_line("{not json", 7)
        with pytest.raises(SchemaError, match="line 9"):
            trace.parse_line('{"type":"mystery"}', 9)

    def test_missing_field_is_schema_error(self):
        with pytest.raises(SchemaError, match="line 2"):
            trace.parse_line('{"type":"activation","iter":0}', 2)

    def test_duplicate_act_id_rejected(self, tmp_path):
        p = tmp_path / "t.jsonl"
        events = [
            trace.ActivationEvent(0, 1, 10, 1.0, 1.0),
            trace.ActivationEvent(0, 1, 10, 1.0, 1.0),
        ]
        trace.write_trace(events, p)
        with pytest.raises(SchemaError, match="duplicate act_id"):
            trace.read_trace(p)

    def test_backwards_iteration_rejected(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text(
            '{"type":"iter_end","iter":1}\n{"type":"iter_end","iter":0}\n'
        )
        with pytest.raises(SchemaError, match="backwards"):
            trace.read_trace(p)

    def test_write_read_round_trip(self, tmp_path):
        events = trace.budget_drop_events(iterations=3, n_acts=4)
        p = tmp_path / "t.jsonl"
        trace.write_trace(events, p)
        assert trace.read_trace(p) == events

    def test_bundled_traces_match_generators(self):
        # the checked-in files are exactly what the seeded generators emit
        assert trace.read_trace(bundled("resnet18_like.jsonl")) == (
            trace.resnet18_like_events()
        )
        assert trace.read_trace(bundled("transformer_like.jsonl")) == (
            trace.transformer_like_events()
        )

    def test_resnet_trace_shape(self):
        events = trace.read_trace(bundled("resnet18_like.jsonl"))
        first = [
            e for e in events if isinstance(e, trace.ActivationEvent) and e.iter == 0
        ]
        assert len(first) == 54
        total = trace.fp32_bytes_per_iteration(events)
        assert 42e6 <= total <= 46e6


def run_cli(argv):
    out = io.StringIO()
    with redirect_stdout(out):
        code = cli.main(argv)
    return code, out.getvalue()


class TestReplayCommand:
    def test_budget_respected_every_iteration(self, tmp_path):
        events = trace.resnet18_like_events(iterations=3)
        tr = tmp_path / "r.jsonl"
        trace.write_trace(events, tr)
        budget = trace.fp32_bytes_per_iteration(events) // 18
        out_csv = tmp_path / "m.csv"
        log = tmp_path / "d.jsonl"
        code, _ = run_cli(
            [
                "replay", "--trace", str(tr), "--mem-budget", str(budget),
                "--step", str(256 * 1024), "--out", str(out_csv),
                "--decision-log", str(log),
            ]
        )
        assert code == 0
        rows = list(csv.DictReader(out_csv.open()))
        assert len(rows) == 3
        for row in rows:
            assert float(row["mem_used"]) <= float(row["budget"])
            assert float(row["ratio"]) >= 18.0 or float(row["mem_used"]) == 0
        decisions = [json.loads(l) for l in log.open()]
        assert len(decisions) == 3 * 54
        assert {d["action"] for d in decisions} <= {"store", "skip"}

    def test_empty_trace_gives_header_only(self, tmp_path):
        tr = tmp_path / "empty.jsonl"
        tr.write_text("")
        code, out = run_cli(
            ["replay", "--trace", str(tr), "--mem-budget", str(1 << 20)]
        )
        assert code == 0
        assert out.strip() == ",".join(cli.METRICS_HEADER)

    def test_malformed_line_exits_2(self, tmp_path):
        tr = tmp_path / "bad.jsonl"
        tr.write_text('{"type":"activation"\n')
        code, _ = run_cli(["replay", "--trace", str(tr), "--mem-budget", "1048576"])
        assert code == 2

    def test_determinism_byte_identical(self, tmp_path):
        events = trace.transformer_like_events(iterations=2)
        tr = tmp_path / "t.jsonl"
        trace.write_trace(events, tr)
        outs = []
        logs = []
        for i in range(2):
            out_csv = tmp_path / f"m{i}.csv"
            log = tmp_path / f"d{i}.jsonl"
            code, _ = run_cli(
                [
                    "replay", "--trace", str(tr),
                    "--mem-budget", str(4 * 1024 * 1024),
                    "--step", str(1024 * 1024),
                    "--seed", "3",
                    "--out", str(out_csv), "--decision-log", str(log),
                ]
            )
            assert code == 0
            outs.append(out_csv.read_bytes())
            logs.append(log.read_bytes())
        assert outs[0] == outs[1]
        assert logs[0] == logs[1]

    def test_mid_run_budget_drop(self, tmp_path):
        events = trace.budget_drop_events()
        tr = tmp_path / "drop.jsonl"
        trace.write_trace(events, tr)
        out_csv = tmp_path / "m.csv"
        code, _ = run_cli(
            [
                "replay", "--trace", str(tr), "--mem-budget", str(8 * 1024 * 1024),
                "--step", str(1024 * 1024), "--out", str(out_csv),
            ]
        )
        assert code == 0
        rows = list(csv.DictReader(out_csv.open()))
        drop_iter = 10
        step = 1024 * 1024
        target = 3 * 1024 * 1024
        for row in rows[drop_iter:]:
            assert float(row["mem_used"]) <= target
            assert abs(float(row["capacity"]) - target) <= step
        assert any(float(r["capacity"]) > target for r in rows[:drop_iter])


class TestBenchCommands:
    def test_bench_reduce_writes_loadable_profile(self, tmp_path):
        from dynact import reduce as red

        prof = tmp_path / "profile.tsv"
        code, out = run_cli(
            [
                "bench-reduce", "--sizes", "64,4096", "--repetitions", "3",
                "--out", str(prof),
            ]
        )
        assert code == 0
        assert "sequential" in out
        rows = red.load_profile(prof)
        assert rows[0].min_numel == 1
        assert rows[-1].max_numel == 4096

    def test_bench_codec_reports_all_widths(self):
        code, out = run_cli(
            ["bench-codec", "--numel", "40000", "--bitwidths", "2,4,8",
             "--repetitions", "2"]
        )
        assert code == 0
        for b, per in [(2, 0.25), (4, 0.5), (8, 1.0)]:
            assert f"b={b}" in out
        assert "0.5" in out  # 4-bit bytes/elem

    def test_bench_codec_compare_backends(self):
        from dynact._backend import available_backends

        code, out = run_cli(
            ["bench-codec", "--numel", "20000", "--repetitions", "2",
             "--compare-backends"]
        )
        assert code == 0
        for name in available_backends():
            assert name in out


class TestTrainRefCommand:
    def test_csv_and_determinism(self, tmp_path):
        out1 = tmp_path / "a.csv"
        out2 = tmp_path / "b.csv"
        for out in (out1, out2):
            code, _ = run_cli(
                ["train-ref", "--epochs", "3", "--seed", "2", "--out", str(out)]
            )
            assert code == 0
        assert out1.read_bytes() == out2.read_bytes()
        rows = list(csv.DictReader(out1.open()))
        assert len(rows) == 3
        assert set(rows[0]) == {
            "epoch", "fp32_acc", "quant_acc", "n_b0", "n_b2", "n_b4", "n_b8", "n_b32",
        }

    def test_width_32_curves_identical(self, tmp_path):
        out = tmp_path / "c.csv"
        code, _ = run_cli(
            ["train-ref", "--epochs", "3", "--bitwidth", "32", "--out", str(out)]
        )
        assert code == 0
        for row in csv.DictReader(out.open()):
            assert row["fp32_acc"] == row["quant_acc"]


class TestReportCommand:
    def _metrics(self, tmp_path):
        events = trace.resnet18_like_events(iterations=2)
        tr = tmp_path / "r.jsonl"
        trace.write_trace(events, tr)
        out_csv = tmp_path / "m.csv"
        run_cli(
            ["replay", "--trace", str(tr), "--mem-budget", str(3 * 1024 * 1024),
             "--step", str(1024 * 1024), "--out", str(out_csv)]
        )
        return out_csv

    def test_summary_contains_compression_ratio(self, tmp_path):
        metrics = self._metrics(tmp_path)
        code, out = run_cli(["report", str(metrics)])
        assert code == 0
        assert "compression_ratio" in out
        assert "budget_violations: 0" in out

    def test_empty_metrics(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text(",".join(cli.METRICS_HEADER) + "\n")
        code, out = run_cli(["report", str(p)])
        assert code == 0
        assert "no iterations" in out

    def test_missing_columns_is_schema_error(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("iter,mem_used\n0,10\n")
        code, _ = run_cli(["report", str(p)])
        assert code == 2

    def test_plot_data_written(self, tmp_path):
        metrics = self._metrics(tmp_path)
        out = tmp_path / "plot.csv"
        code, _ = run_cli(["report", str(metrics), "--out", str(out)])
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert rows and "mem_used_mb" in rows[0]
