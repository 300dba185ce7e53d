import dataclasses

import numpy as np
import pytest

from ukast.complexity import CostReport, _Walker, activation_cost, count
from ukast.model import SegModel, VARIANT_ROWS, make_variant
from ukast.nn import Linear


class TestActivationCost:
    def test_rational_example(self):
        assert activation_cost("rational(3,4)", 1) == 10
        assert activation_cost("rational(3, 4)", 7) == 70

    def test_gelu_documented_count(self):
        assert activation_cost("gelu", 1) == 14

    def test_relu_on_zero_elements(self):
        assert activation_cost("relu", 0) == 0

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown activation kind"):
            activation_cost("swish", 10)


class TestLeafRules:
    def test_linear_formula_example(self):
        wk = _Walker()
        layer = Linear(32, 64, np.random.default_rng(0))
        wk.linear("fc", layer, positions=100)
        row = wk.rows[0]
        assert row.macs == 204_800
        assert row.params == 2_112

    def test_attention_macs_linear_in_tokens(self):
        from ukast.attention import WindowAttention

        attn = WindowAttention(16, 2, 4, np.random.default_rng(1))
        wk1, wk2 = _Walker(), _Walker()
        wk1.attention("a", attn, 4, 4)
        wk2.attention("a", attn, 8, 4)  # doubled token count, same window
        macs1 = sum(r.macs for r in wk1.rows)
        macs2 = sum(r.macs for r in wk2.rows)
        assert macs2 == 2 * macs1

    def test_unsupported_ffn_kind_rejected(self):
        wk = _Walker()
        with pytest.raises(ValueError, match="unsupported FFN kind"):
            wk.ffn("f", Linear(4, 4, np.random.default_rng(0)), 10)


class TestModelCounts:
    @pytest.mark.parametrize("row", VARIANT_ROWS)
    def test_params_equal_live_trainable_scalars(self, row):
        cfg = make_variant(*row, scale="tiny")
        model = SegModel(cfg, seed=0)
        report = count(model, (1, cfg.img_size, cfg.img_size))
        assert report.params == model.param_scalar_count()

    def test_named_models_params_match(self):
        for name in ("ukat", "ukast"):
            from ukast.model import parse_variant

            cfg = make_variant(*parse_variant(name), scale="desk")
            model = SegModel(cfg, seed=0)
            report = count(model, (1, 64, 64))
            assert report.params == model.param_scalar_count()

    def test_totals_are_column_sums(self):
        cfg = make_variant("swin", "grkan", rc=True, scale="tiny")
        report = count(SegModel(cfg, seed=0), (1, 32, 32))
        assert report.params == sum(r.params for r in report.rows)
        assert report.macs == sum(r.macs for r in report.rows)
        assert report.elementwise == sum(r.elementwise for r in report.rows)

    def test_channel_mismatch_rejected(self):
        cfg = make_variant("swin", "mlp", scale="tiny")
        with pytest.raises(ValueError, match="channels"):
            count(SegModel(cfg, seed=0), (3, 32, 32))


def _delta(scale, encoder="swin", rc=False):
    mlp = make_variant(encoder, "mlp", rc=rc, scale=scale)
    kan = make_variant(encoder, "grkan", rc=rc, scale=scale)
    rep_mlp = count(SegModel(mlp, seed=0), (1, mlp.img_size, mlp.img_size))
    rep_kan = count(SegModel(kan, seed=0), (1, kan.img_size, kan.img_size))
    return mlp, kan, rep_mlp, rep_kan


class TestTableDeltas:
    def test_grkan_lowers_flops_raises_params(self):
        for scale in ("tiny", "desk"):
            cfg_mlp, cfg_kan, rep_mlp, rep_kan = _delta(scale)
            assert rep_kan.gflops < rep_mlp.gflops
            # surplus: 2 rational stages per FFN, 2 FFNs per block pair
            ffn_count = 2 * sum(cfg_kan.depths)
            coeffs = cfg_kan.groups * (cfg_kan.rational_m + 1 + cfg_kan.rational_n)
            assert rep_kan.params - rep_mlp.params == 2 * coeffs * ffn_count

    def test_linear_weights_identical_between_ffn_kinds(self):
        _, _, rep_mlp, rep_kan = _delta("tiny")
        assert rep_kan.macs <= rep_mlp.macs

    def test_rc_raises_both(self):
        base = make_variant("swin", "grkan", rc=False, scale="tiny")
        with_rc = make_variant("swin", "grkan", rc=True, scale="tiny")
        rep0 = count(SegModel(base, seed=0), (1, 32, 32))
        rep1 = count(SegModel(with_rc, seed=0), (1, 32, 32))
        assert rep1.gflops > rep0.gflops
        assert rep1.params > rep0.params

    def test_ordering_matches_published_structure(self):
        # mlp > grkan in flops within each rc tier; rc rows above non-rc rows
        reports = {}
        for encoder, ffn, rc in VARIANT_ROWS:
            if encoder != "swin":
                continue
            cfg = make_variant(encoder, ffn, rc=rc, scale="desk")
            reports[(ffn, rc)] = count(SegModel(cfg, seed=0), (1, 64, 64))
        assert reports[("grkan", False)].gflops < reports[("mlp", False)].gflops
        assert reports[("grkan", True)].gflops < reports[("mlp", True)].gflops
        assert reports[("grkan", False)].params > reports[("mlp", False)].params
        for ffn in ("mlp", "grkan"):
            assert reports[(ffn, True)].gflops > reports[(ffn, False)].gflops
            assert reports[(ffn, True)].params > reports[(ffn, False)].params


class TestReportFormats:
    def test_text_contains_header_and_totals(self):
        cfg = make_variant("swin", "grkan", scale="tiny")
        report = count(SegModel(cfg, seed=0), (1, 32, 32))
        text = report.format_text()
        assert "cost table v" in text
        assert "gflops = (2*MACs + elementwise ops) / 1e9" in text
        assert "TOTAL" in text

    def test_csv_parses(self):
        cfg = make_variant("swin", "mlp", scale="tiny")
        report = count(SegModel(cfg, seed=0), (1, 32, 32))
        lines = report.format_csv().splitlines()
        assert lines[0] == "layer,params,macs,elementwise"
        total = [l for l in lines if l.startswith("TOTAL")][0]
        assert int(total.split(",")[1]) == report.params
