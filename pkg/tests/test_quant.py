import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference
from dynact import quant
from dynact.errors import CorruptData, InvalidInput

F32 = np.float32


class TestComputeQParams:
    def test_two_point_endpoints(self):
        p = quant.compute_qparams([0.0, 1.0], 2)
        assert p.min == 0.0
        assert p.scale == pytest.approx(float(F32(1.0) / F32(3.0)), abs=0)

    def test_constant_tensor_degenerates_to_zero_scale(self):
        p = quant.compute_qparams([5.0, 5.0, 5.0], 4)
        assert p.min == 5.0
        assert p.scale == 0.0

    def test_matches_scalar_scan_oracle(self):
        values = [-2.0, 0.5, 6.0]
        p = quant.compute_qparams(values, 8)
        mn, scale = reference.scalar_qparams(values, 8)
        assert p.min == mn == -2.0
        assert p.scale == scale == float(F32(8.0) / F32(255.0))

    @pytest.mark.parametrize("bad", [0, 1, 3, 16, 32])
    def test_rejects_bitwidths_outside_packable_set(self, bad):
        with pytest.raises(InvalidInput):
            quant.compute_qparams([1.0, 2.0], bad)

    def test_rejects_empty_and_nan(self):
        with pytest.raises(InvalidInput):
            quant.compute_qparams([], 4)
        with pytest.raises(InvalidInput):
            quant.compute_qparams([1.0, float("nan")], 4)

    @given(
        st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=200),
        st.sampled_from([2, 4, 8]),
    )
    @settings(max_examples=60, deadline=None)
    def test_oracle_agreement_random(self, values, bitwidth):
        p = quant.compute_qparams(values, bitwidth)
        mn, scale = reference.scalar_qparams(values, bitwidth)
        assert p.min == mn
        assert p.scale == scale


class TestQuantize:
    def test_ties_round_away_from_zero(self):
        p = quant.QuantParams(2, 0.0, float(F32(1.0) / F32(3.0)))
        q = quant.quantize([0.0, 0.5, 1.0], p)
        # 0.5 / (1/3) = 1.5 rounds up to 2
        assert q.tolist() == [0, 2, 3]

    def test_constant_range_maps_to_zero(self):
        p = quant.compute_qparams([5.0, 5.0, 5.0], 4)
        assert quant.quantize([5.0, 5.0, 5.0], p).tolist() == [0, 0, 0]

    def test_endpoints_map_to_extremes(self):
        p = quant.compute_qparams([0.0, 1.0], 2)
        assert quant.quantize([0.0, 1.0], p).tolist() == [0, 3]

    @pytest.mark.parametrize("bad_width", [0, 32])
    def test_passthrough_widths_rejected(self, bad_width):
        p = quant.QuantParams(bad_width, 0.0, 1.0)
        with pytest.raises(InvalidInput):
            quant.quantize([1.0], p)

    @given(
        st.lists(st.floats(-1e5, 1e5, width=32), min_size=1, max_size=300),
        st.sampled_from([2, 4, 8]),
    )
    @settings(max_examples=80, deadline=None)
    def test_matches_scalar_oracle_and_stays_in_range(self, values, bitwidth):
        p = quant.compute_qparams(values, bitwidth)
        q = quant.quantize(values, p)
        assert q.tolist() == reference.scalar_quantize(values, p.min, p.scale, bitwidth)
        assert int(q.min()) >= 0 and int(q.max()) <= p.qmax

    @given(st.lists(st.floats(-100, 100, width=32), min_size=2, max_size=100))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_the_input(self, values):
        p = quant.compute_qparams(values, 4)
        q = quant.quantize(values, p)
        order = np.argsort(np.asarray(values, dtype=F32), kind="stable")
        assert (np.diff(q[order].astype(np.int64)) >= 0).all()


class TestDequantize:
    def test_endpoint_reconstruction(self):
        p = quant.QuantParams(2, 0.0, float(F32(1.0) / F32(3.0)))
        x = quant.dequantize([0, 3], p)
        assert x.tolist() == [0.0, 1.0]

    def test_constant_round_trip(self):
        p = quant.QuantParams(4, 5.0, 0.0)
        assert quant.dequantize([0, 0, 0], p).tolist() == [5.0, 5.0, 5.0]

    def test_error_bound_on_worked_example(self):
        p = quant.QuantParams(2, 0.0, float(F32(1.0) / F32(3.0)))
        x = [0.0, 0.5, 1.0]
        back = quant.dequantize(quant.quantize(x, p), p)
        assert back.tolist() == reference.scalar_dequantize([0, 2, 3], p.min, p.scale)
        assert np.abs(back - np.asarray(x, F32)).max() <= 1 / 6 + 1e-6

    def test_out_of_range_level_is_corrupt(self):
        p = quant.QuantParams(4, 0.0, 1.0)
        with pytest.raises(CorruptData):
            quant.dequantize([16], p)

    @given(
        st.lists(st.floats(-1e4, 1e4, width=32), min_size=1, max_size=300),
        st.sampled_from([2, 4, 8]),
    )
    @settings(max_examples=80, deadline=None)
    def test_round_trip_bound(self, values, bitwidth):
        p = quant.compute_qparams(values, bitwidth)
        back = quant.dequantize(quant.quantize(values, p), p)
        err = np.abs(back - np.asarray(values, F32))
        bound = p.scale / 2 + 4 * np.spacing(F32(max(abs(v) for v in values) or 1.0))
        assert float(err.max()) <= bound


class TestImportance:
    def test_range_metric(self):
        assert quant.importance([0.0, 1.0], quant.ImportanceMetric.RANGE) == 1.0

    def test_magnitude_is_l2_norm(self):
        assert quant.importance([3.0, 4.0], quant.ImportanceMetric.MAGNITUDE) == pytest.approx(5.0)

    def test_quant_error_estimate_formula(self):
        # scale(b=4) = 3/15 = 0.2; 0.2/2 * sqrt(4) = 0.2
        got = quant.importance([0.0, 1.0, 2.0, 3.0], quant.ImportanceMetric.QUANT_ERROR)
        assert got == pytest.approx(0.2)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInput):
            quant.importance([], quant.ImportanceMetric.RANGE)

    @given(st.lists(st.floats(-1e3, 1e3, width=32), min_size=1, max_size=1000))
    @settings(max_examples=60, deadline=None)
    def test_oracle_agreement(self, values):
        rng = quant.importance(values, quant.ImportanceMetric.RANGE)
        assert rng == float(reference.scalar_max(values)) - float(reference.scalar_min(values))
        mag = quant.importance(values, quant.ImportanceMetric.MAGNITUDE)
        want = math.sqrt(sum(float(F32(v)) ** 2 for v in values))
        assert mag == pytest.approx(want, rel=1e-5, abs=1e-12)


class TestEmaUpdate:
    @pytest.mark.parametrize(
        "ma,decay,observed,expect",
        [(0.0, 0.9, 10.0, 1.0), (5.0, 0.9, 5.0, 5.0), (1.0, 0.5, 3.0, 2.0)],
    )
    def test_arithmetic(self, ma, decay, observed, expect):
        s = quant.ImportanceState(current=0.0, moving_average=ma, decay=decay)
        out = quant.ema_update(s, observed)
        assert out.moving_average == pytest.approx(expect)
        assert out.current == observed

    def test_negative_observation_rejected(self):
        with pytest.raises(InvalidInput):
            quant.ema_update(quant.ImportanceState(), -1.0)

    def test_decay_domain_enforced(self):
        with pytest.raises(InvalidInput):
            quant.ImportanceState(decay=1.0)
