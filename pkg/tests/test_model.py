import dataclasses

import numpy as np
import pytest

import ukast.tensor as T
from ukast.grkan import GrKanFfn, MlpFfn
from ukast.model import (
    ModelConfig,
    RCBlock,
    SegModel,
    SwinBlockPair,
    DecoderStage,
    VARIANT_ROWS,
    make_variant,
    parse_variant,
    variant_name,
)
from ukast.tensor import Tape, Tensor
from ukast.train import dice_ce_loss


def zero_sublayer_outputs(block: SwinBlockPair):
    """Zero every sublayer's output projection so residuals dominate."""
    for attn in (block.attn, block.attn_shift):
        attn.proj.weight.data[:] = 0.0
        attn.proj.bias.data[:] = 0.0
    for ffn in (block.ffn1, block.ffn2):
        ffn.linear2.weight.data[:] = 0.0
        ffn.linear2.bias.data[:] = 0.0
    if block.rc is not None:
        block.rc.body.conv.weight.data[:] = 0.0
        block.rc.body.conv.bias.data[:] = 0.0


class TestRCBlock:
    def test_zero_conv_is_identity(self):
        rc = RCBlock(4, np.random.default_rng(0))
        rc.body.conv.weight.data[:] = 0.0
        rc.body.conv.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 4, 4)).astype(np.float32))
        np.testing.assert_array_equal(rc(x).data, x.data)

    def test_shape_preserved(self):
        rc = RCBlock(6, np.random.default_rng(2))
        x = Tensor(np.random.default_rng(3).normal(size=(1, 8, 6, 6)).astype(np.float32))
        assert rc(x).shape == x.shape


class TestBlockPair:
    def _block(self, ffn="grkan", rc=True, seed=0):
        cfg = make_variant("swin", ffn, rc=rc, scale="tiny")
        return SwinBlockPair(cfg, 16, 2, np.random.default_rng(seed), rc_enabled=rc)

    def test_residual_identity_when_sublayers_zeroed(self):
        for ffn in ("mlp", "grkan"):
            block = self._block(ffn=ffn)
            zero_sublayer_outputs(block)
            x = Tensor(np.random.default_rng(5).normal(size=(1, 8, 8, 16)).astype(np.float32))
            np.testing.assert_allclose(block(x).data, x.data, atol=1e-6)

    def test_equation_order_matches_manual_composition(self):
        block = self._block()
        x = Tensor(np.random.default_rng(7).normal(size=(1, 8, 8, 16)).astype(np.float32))
        v0 = block.rc(x)
        z1h = T.add(block.attn(block.norm1(v0)), v0)
        z1 = T.add(block.ffn1(block.norm2(z1h)), z1h)
        z2h = T.add(block.attn_shift(block.norm3(z1)), z1)
        want = T.add(block.ffn2(block.norm4(z2h)), z2h)
        np.testing.assert_array_equal(block(x).data, want.data)

    def test_mlp_grkan_equivalence_at_init(self):
        # same rng stream -> identical linear/attention weights; only the
        # feed-forward nonlinearity differs (identity/gelu-fit rationals)
        a = self._block(ffn="mlp", rc=False, seed=11)
        b = self._block(ffn="grkan", rc=False, seed=11)
        x = Tensor(np.random.default_rng(13).normal(size=(1, 8, 8, 16)).astype(np.float32))
        diff = float(np.abs(a(x).data - b(x).data).max())
        assert diff < 1e-2


class TestDecoderStage:
    def test_resolution_mismatch_rejected(self):
        stage = DecoderStage(8, 4, np.random.default_rng(0))
        deep = Tensor(np.zeros((1, 8, 4, 4), np.float32))
        skip = Tensor(np.zeros((1, 4, 16, 16), np.float32))
        with pytest.raises(T.ShapeError, match="resolution mismatch"):
            stage(deep, skip)

    def test_output_matches_skip_resolution(self):
        stage = DecoderStage(8, 4, np.random.default_rng(1))
        deep = Tensor(np.random.default_rng(2).normal(size=(1, 8, 4, 4)).astype(np.float32))
        skip = Tensor(np.random.default_rng(3).normal(size=(1, 4, 8, 8)).astype(np.float32))
        out = stage(deep, skip)
        assert out.shape == (1, 4, 8, 8)

    def test_zeroed_skip_weights_ignore_skip(self):
        stage = DecoderStage(8, 4, np.random.default_rng(4))
        stage.eval()
        # first conv consumes [up(4) ; skip(4)]: zero the skip half
        stage.convs[0].conv.weight.data[:, 4:] = 0.0
        deep = Tensor(np.random.default_rng(5).normal(size=(1, 8, 4, 4)).astype(np.float32))
        skip_a = Tensor(np.random.default_rng(6).normal(size=(1, 4, 8, 8)).astype(np.float32))
        skip_b = Tensor(np.zeros((1, 4, 8, 8), np.float32))
        np.testing.assert_array_equal(stage(deep, skip_a).data, stage(deep, skip_b).data)


class TestSegModel:
    def test_output_shape_matches_input(self):
        cfg = dataclasses.replace(make_variant("swin", "grkan", rc=True, scale="desk"),
                                  classes=2)
        model = SegModel(cfg, seed=0)
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 1, 64, 64)).astype(np.float32))
        assert model(x).shape == (1, 2, 64, 64)

    def test_forward_deterministic(self):
        cfg = make_variant("swin", "grkan", rc=True, scale="tiny")
        model = SegModel(cfg, seed=0)
        x = Tensor(np.random.default_rng(1).uniform(size=(1, 1, 32, 32)).astype(np.float32))
        model.eval()
        np.testing.assert_array_equal(model(x).data, model(x).data)

    def test_encoder_skip_pyramid(self):
        cfg = make_variant("swin", "mlp", scale="tiny")
        model = SegModel(cfg, seed=0)
        x = Tensor(np.random.default_rng(2).uniform(size=(1, 1, 32, 32)).astype(np.float32))
        skips = model.encoder(x)
        assert len(skips) == len(cfg.embeds)
        for i, s in enumerate(skips):
            assert s.shape[1] == cfg.embeds[i]
            assert s.shape[2] == 32 // cfg.patch[0] // 2**i

    def test_vit_encoder_fixed_resolution(self):
        cfg = make_variant("vit", "grkan", scale="tiny")
        model = SegModel(cfg, seed=0)
        x = Tensor(np.zeros((1, 1, 16, 16), np.float32))
        with pytest.raises(T.ShapeError, match="fixed at grid"):
            model(x)

    def test_vit_pyramid_matches_swin_decoder_names(self):
        swin = SegModel(make_variant("swin", "grkan", rc=True, scale="desk"), seed=0)
        vit = SegModel(make_variant("vit", "grkan", scale="desk"), seed=0)
        swin_dec = {n for n, _ in swin.named_parameters() if not n.startswith("encoder")}
        vit_dec = {n for n, _ in vit.named_parameters() if not n.startswith("encoder")}
        assert swin_dec == vit_dec

    def test_gradient_flow_every_parameter(self):
        for encoder, ffn, rc in (("swin", "grkan", True), ("vit", "grkan", False)):
            cfg = dataclasses.replace(make_variant(encoder, ffn, rc=rc, scale="tiny"),
                                      classes=2)
            model = SegModel(cfg, seed=3)
            x = Tensor(np.random.default_rng(4).uniform(size=(2, 1, 32, 32)).astype(np.float32))
            target = np.random.default_rng(5).integers(0, 2, size=(2, 32, 32))
            with Tape():
                loss = dice_ce_loss(model(x), target, 2)
                model.zero_grad()
                T.backward(loss)
            for name, p in model.named_parameters():
                assert p.grad is not None, name
                norm = float(np.linalg.norm(p.grad))
                assert np.isfinite(norm) and norm > 0, name

    def test_single_sample_overfit_smoke(self):
        from ukast.train import AdamW, cosine_lr

        cfg = dataclasses.replace(make_variant("swin", "grkan", rc=True, scale="tiny"),
                                  classes=2)
        model = SegModel(cfg, seed=0)
        rng = np.random.default_rng(6)
        img = rng.uniform(size=(1, 1, 32, 32)).astype(np.float32)
        target = (np.add.outer(np.arange(32), np.arange(32)) > 32).astype(np.int64)[None]
        opt = AdamW(model.named_parameters(), lr=2e-3)
        losses = []
        steps = 50
        for step in range(steps):
            with Tape():
                loss = dice_ce_loss(model(Tensor(img)), target, 2)
                model.zero_grad()
                T.backward(loss)
            opt.step(lr=cosine_lr(step, steps, 2e-3))
            losses.append(loss.item())
        assert losses[-1] < losses[0] / 10


class TestVariantFactory:
    def test_all_six_rows_build(self):
        for encoder, ffn, rc in VARIANT_ROWS:
            cfg = make_variant(encoder, ffn, rc=rc, scale="tiny")
            assert cfg.encoder == encoder and cfg.ffn == ffn and cfg.rc == rc

    def test_named_models(self):
        assert parse_variant("ukast") == ("swin", "grkan", True)
        assert parse_variant("ukat") == ("vit", "grkan", False)
        assert make_variant(*parse_variant("ukast")) == make_variant("swin", "grkan", True)

    def test_vit_rc_rejected(self):
        with pytest.raises(ValueError, match="only valid with the swin"):
            make_variant("vit", "mlp", rc=True)
        with pytest.raises(ValueError, match="only defined for the swin"):
            ModelConfig(encoder="vit", rc=True, embeds=(96,), depths=(4,), heads=(4,))

    def test_variant_name_roundtrip(self):
        for row in VARIANT_ROWS:
            assert parse_variant(variant_name(*row)) == row

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="cannot parse variant"):
            parse_variant("resnet")


class TestConfigSerialization:
    def test_flat_roundtrip(self):
        cfg = make_variant("swin", "grkan", rc=True, scale="desk")
        flat = cfg.to_flat()
        assert flat["model.encoder"] == "swin"
        assert flat["model.embeds"] == "24,48,96,192"
        assert ModelConfig.from_flat(flat) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError, match="unknown model config key"):
            ModelConfig.from_flat({"model.nonsense": "1"})

    def test_stage_configs_view(self):
        cfg = make_variant("swin", "mlp", rc=True, scale="desk")
        stages = cfg.stage_configs()
        assert [s.embed for s in stages] == [24, 48, 96, 192]
        assert all(s.rc_enabled for s in stages)
        assert all(s.ffn_kind == "mlp" for s in stages)
