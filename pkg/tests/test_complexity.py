from __future__ import annotations

import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracdet import params as P
from fracdet.complexity import (
    CostReport, CostRow, axial_savings, conv_macs, cost_report, count_macs, count_params, dense_vs_axial_macs,
    depthwise_macs,
)
from fracdet.core import Tensor, make_rng
from fracdet.detector.model import DetectorConfig, base_param_formula, build_model
from fracdet.dfa import DfaConfig, DfaParams, param_count_formula as dfa_formula
from fracdet.mc import McConfig, McParams, param_count_formula as mc_formula


def blob_scalar_count(obj) -> int:
    """Independent count: number of doubles listed in the serialized header."""
    header, data = P.parse(P.dumps(obj))
    listed = sum(int(np.prod(e["shape"])) for e in header["tensors"])
    assert listed == data.size
    return listed


class TestCountParams:
    def test_pointwise_conv(self):
        holder = [Tensor(np.zeros((64, 64, 1, 1))), Tensor(np.zeros(64))]
        assert count_params(holder) == 4160

    def test_depthwise_7x7(self):
        holder = [Tensor(np.zeros((64, 7, 7))), Tensor(np.zeros(64))]
        assert count_params(holder) == 3200

    @pytest.mark.parametrize("c", [8, 32])
    def test_dfa_matches_blob_enumeration(self, c):
        cfg = DfaConfig(c)
        p = DfaParams.init(cfg, make_rng(c))
        assert count_params(p) == dfa_formula(cfg) == blob_scalar_count(p)

    @pytest.mark.parametrize("heads,c", [(2, 16), (4, 64)])
    def test_dfa_heads(self, heads, c):
        cfg = DfaConfig(c, heads=heads)
        assert count_params(DfaParams.init(cfg, make_rng(0))) == dfa_formula(cfg)

    @pytest.mark.parametrize("c", [8, 64])
    def test_mc_matches_blob_enumeration(self, c):
        cfg = McConfig(c)
        p = McParams.init(cfg, make_rng(c))
        assert count_params(p) == mc_formula(cfg) == blob_scalar_count(p)

    def test_cost_rows_agree_with_instantiated_params(self):
        for cfg, params in ((DfaConfig(16), DfaParams.init(DfaConfig(16), make_rng(0))),
                            (McConfig(16), McParams.init(McConfig(16), make_rng(0)))):
            assert cost_report(cfg, (1, 16, 8, 8)).total_params == count_params(params)

    def test_detector_report_matches_model(self):
        for dfa_on in (False, True):
            for mc_on in (False, True):
                cfg = DetectorConfig(with_dfa=dfa_on, with_mc=mc_on)
                rep = cost_report(cfg, (1, 1, 64, 64))
                assert rep.total_params == count_params(build_model(cfg, 0))


class TestCountMacs:
    def test_dense_depthwise_per_position(self):
        assert depthwise_macs((64, 21, 21), (1, 64, 1, 1)) == 28224

    def test_axial_pair_per_position(self):
        dense, axial = dense_vs_axial_macs(21, 64)
        assert (dense, axial) == (28224, 2688)
        assert dense / axial == 10.5

    def test_pointwise_conv_on_map(self):
        c, h, w = 64, 32, 32
        assert conv_macs(1, c, c, 1, 1, h, w) == c * c * h * w

    def test_depthwise_channel_mismatch(self):
        with pytest.raises(ValueError):
            depthwise_macs((3, 3, 3), (1, 4, 5, 5))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 31), st.integers(1, 64), st.integers(1, 40), st.integers(1, 40), st.integers(1, 3))
    def test_axial_identity(self, k, c, h, w, n):
        dense, axial = dense_vs_axial_macs(k, c, h, w, n)
        # exact integer form of axial == (2k / k^2) * dense
        assert axial * k * k == 2 * k * dense

    def test_mc_depthwise_rows(self):
        rep = cost_report(McConfig(64), (1, 64, 32, 32))
        rows = {r.operator: r.macs for r in rep.rows}
        hw = 32 * 32
        for i, (k, m) in enumerate(McConfig(64).branches, start=1):
            assert rows[f"branch{i}_dw{k}x{k}"] == 64 * hw * k * k
            assert rows[f"branch{i}_dw1x{m}"] == rows[f"branch{i}_dw{m}x1"] == 64 * hw * m

    def test_count_macs_is_report_total(self):
        cfg = McConfig(8)
        assert count_macs(cfg, (2, 8, 10, 10)) == cost_report(cfg, (2, 8, 10, 10)).total_macs

    def test_macs_scale_with_batch(self):
        cfg = McConfig(8)
        assert count_macs(cfg, (3, 8, 10, 10)) == 3 * count_macs(cfg, (1, 8, 10, 10))

    @pytest.mark.parametrize("shape", [(1, 0, 8, 8), (1, 8, 8), (0, 8, 8, 8)])
    def test_invalid_shape(self, shape):
        with pytest.raises(ValueError):
            cost_report(McConfig(8), shape)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            cost_report(DfaConfig(8), (1, 16, 8, 8))


class TestAxialSavings:
    @pytest.mark.parametrize("k,ratio", [(7, 3.5), (21, 10.5), (2, 1.0), (11, 5.5), (1, 0.5)])
    def test_examples(self, k, ratio):
        assert axial_savings(k, 64) == ratio

    @given(st.integers(1, 101), st.integers(1, 512))
    def test_is_half_k(self, k, c):
        assert axial_savings(k, c) == k / 2

    def test_invalid(self):
        with pytest.raises(ValueError):
            axial_savings(0, 8)


class TestSpatialInvariance:
    @pytest.mark.parametrize("c", [8, 32, 64])
    def test_dfa_params_independent_of_size(self, c):
        cfg = DfaConfig(c)
        totals = {cost_report(cfg, (1, c, s, s + 3)).total_params for s in (8, 16, 32, 13)}
        assert totals == {dfa_formula(cfg)}

    @pytest.mark.parametrize("c", [8, 32, 64])
    def test_mc_params_independent_of_size(self, c):
        cfg = McConfig(c)
        totals = {cost_report(cfg, (1, c, s, s)).total_params for s in (8, 16, 32, 13)}
        assert totals == {mc_formula(cfg)}

    def test_macs_do_depend_on_size(self):
        cfg = McConfig(8)
        assert count_macs(cfg, (1, 8, 16, 16)) < count_macs(cfg, (1, 8, 32, 32))


class TestAblationDeltas:
    @pytest.mark.parametrize("widths", [(8, 16, 32), (4, 8, 32), (16, 16, 32), (8, 32)])
    def test_additive_grid(self, widths):
        base = DetectorConfig(widths=widths)
        counts = {
            (d, m): count_params(build_model(replace(base, with_dfa=d, with_mc=m), 0))
            for d in (False, True) for m in (False, True)
        }
        dfa = count_params(DfaParams.init(base.dfa_config(), make_rng(0)))
        mc = count_params(McParams.init(base.mc_config(), make_rng(0)))
        assert counts[False, False] == base_param_formula(base)
        assert counts[True, False] - counts[False, False] == dfa
        assert counts[False, True] - counts[False, False] == mc
        assert counts[True, True] - counts[False, False] == dfa + mc

    def test_delta_constant_across_backbones(self):
        deltas = set()
        for widths in ((8, 16, 32), (4, 8, 32), (16, 16, 32), (8, 32)):
            base = DetectorConfig(widths=widths, with_dfa=False, with_mc=False)
            plain = count_params(build_model(base, 0))
            full = count_params(build_model(replace(base, with_dfa=True, with_mc=True), 0))
            deltas.add(full - plain)
        assert len(deltas) == 1


class TestReport:
    def test_totals_are_row_sums(self):
        rep = cost_report(DetectorConfig(), (2, 1, 64, 64))
        assert rep.total_params == sum(r.params for r in rep.rows)
        assert rep.total_macs == sum(r.macs for r in rep.rows)
        assert all(isinstance(r.params, int) and isinstance(r.macs, int) for r in rep.rows)

    def test_additive_across_modules(self):
        a = cost_report(DfaConfig(8), (1, 8, 8, 8))
        b = cost_report(McConfig(8), (1, 8, 8, 8))
        merged = CostReport((1, 8, 8, 8), list(a.rows))
        merged.extend(b)
        assert merged.total_params == a.total_params + b.total_params
        assert merged.total_macs == a.total_macs + b.total_macs

    def test_csv_columns(self):
        rep = cost_report(McConfig(8), (1, 8, 8, 8))
        rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
        assert list(rows[0]) == ["module", "operator", "params", "macs"]
        assert [int(r["macs"]) for r in rows] == [r.macs for r in rep.rows]

    def test_json_round_trip(self):
        rep = CostReport((1, 2, 3, 4), [CostRow("m", "op", 3, 5), CostRow("m", "op2", 4, 6)])
        doc = json.loads(rep.to_json())
        assert doc["total_params"] == 7 and doc["total_macs"] == 11
        assert doc["input_shape"] == [1, 2, 3, 4]

    def test_unknown_module(self):
        with pytest.raises(TypeError):
            cost_report(object(), (1, 1, 1, 1))
