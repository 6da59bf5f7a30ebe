"""Architecture builders: schedules, shapes, wiring, determinism."""

import pytest
import torch

from nunet.arch import (
    BackboneConfig,
    ChannelSchedule,
    MDSCConfig,
    MOUConfig,
    NUNetConfig,
    build_backbone,
    build_mou,
    build_nunet,
    build_variant,
    conv_block,
    mou_depth_schedule,
    variant_config,
)
from nunet.complexity import count_params
from nunet.errors import ConfigError, ShapeError


class TestChannelSchedule:
    def test_default_widths(self):
        s = ChannelSchedule()
        assert [s.width(i) for i in range(1, 9)] == [32, 64, 128, 256, 512, 512, 512, 512]

    def test_nondecreasing_and_capped(self):
        s = ChannelSchedule(base_width=8, cap=64)
        widths = [s.width(i) for i in range(1, 12)]
        assert widths[0] == 8
        assert all(a <= b for a, b in zip(widths, widths[1:]))
        assert max(widths) == 64

    def test_invalid(self):
        with pytest.raises(ConfigError):
            ChannelSchedule(base_width=0)
        with pytest.raises(ConfigError):
            ChannelSchedule(base_width=64, cap=32)


class TestDepthSchedule:
    def test_seven_levels(self):
        assert mou_depth_schedule(7) == [11, 9, 7, 5, 3, 1]

    def test_two_levels(self):
        assert mou_depth_schedule(2) == [1]

    def test_five_levels(self):
        # frozen from the defining formula D_i = 2(L - i) - 1
        assert mou_depth_schedule(5) == [7, 5, 3, 1]

    def test_too_shallow(self):
        with pytest.raises(ConfigError):
            mou_depth_schedule(1)


class TestBackbone:
    def test_rejects_even_or_shallow_depth(self):
        with pytest.raises(ConfigError):
            BackboneConfig(depth=8)
        with pytest.raises(ConfigError):
            BackboneConfig(depth=1)

    def test_smallest_legal_depth(self):
        cfg = BackboneConfig(depth=3, channels=ChannelSchedule(base_width=1, cap=1))
        model = build_backbone(cfg, input_size=2)
        model.eval()
        with torch.no_grad():
            out = model(torch.rand(1, 1, 2, 2))
        assert out.shape == (1, 1, 2, 2)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_forward_shape_and_range(self):
        model = build_backbone(BackboneConfig(depth=5, channels=ChannelSchedule(4, 16)),
                               input_size=32)
        model.eval()
        out = model(torch.rand(2, 1, 32, 32))
        assert out.shape == (2, 1, 32, 32)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_divisor_error_names_required_divisor(self):
        model = build_backbone(BackboneConfig(depth=5, channels=ChannelSchedule(4, 16)),
                               input_size=32)
        with pytest.raises(ShapeError, match="divisible by 4"):
            model(torch.rand(1, 1, 30, 30))


class TestMOU:
    def test_degenerate_depth_one(self):
        mou = build_mou(MOUConfig(stage_index=1, depth=1, channels=8))
        final, outs = mou(torch.rand(1, 8, 16, 16))
        assert final.shape == (1, 8, 16, 16)
        assert outs == []
        # exactly one conv block: 9*8*8 + 8 + 2*8
        assert count_params(mou) == count_params(conv_block(8, 8)) == 600

    def test_depth_three(self):
        mou = build_mou(MOUConfig(stage_index=1, depth=3, channels=8))
        final, outs = mou(torch.rand(1, 8, 16, 16))
        assert final.shape == (1, 8, 16, 16)
        assert [tuple(o.shape) for o in outs] == [(1, 8, 8, 8)]

    def test_depth_eleven_scales(self):
        mou = build_mou(MOUConfig(stage_index=1, depth=11, channels=32))
        final, outs = mou(torch.rand(1, 32, 256, 256))
        assert final.shape == (1, 32, 256, 256)
        assert sorted(o.shape[2] for o in outs) == [8, 16, 32, 64, 128]
        assert all(o.shape[1] == 32 for o in outs)

    def test_even_depth_rejected(self):
        with pytest.raises(ConfigError):
            MOUConfig(stage_index=1, depth=4, channels=8)


def small_config(depth=7, base=4, cap=32, mou="auto", mdsc=(), input_size=32, seed=0,
                 skip_fusion="concat+sum"):
    schedule = ChannelSchedule(base_width=base, cap=cap)
    backbone = BackboneConfig(depth=depth, channels=schedule)
    L = backbone.levels
    if mou == "auto":
        mous = tuple(MOUConfig(stage_index=i, depth=d, channels=schedule.width(i))
                     for i, d in enumerate(mou_depth_schedule(L), start=1))
    elif mou == "ones":
        mous = tuple(MOUConfig(stage_index=i, depth=1, channels=schedule.width(i))
                     for i in range(1, L))
    else:
        mous = mou
    mdscs = tuple(MDSCConfig(s) for s in mdsc)
    return NUNetConfig(backbone=backbone, mous=mous, mdscs=mdscs,
                       skip_fusion=skip_fusion, input_size=input_size, seed=seed)


class TestNUNet:
    def test_forward_contract_small(self):
        model = build_nunet(small_config(depth=7, mdsc=(1,)))
        model.eval()
        out = model(torch.rand(2, 1, 32, 32))
        assert out.shape == (2, 1, 32, 32)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_empty_mou_mdsc_equals_backbone(self):
        cfg = small_config(mou=(), mdsc=())
        assert count_params(build_nunet(cfg)) == count_params(
            build_backbone(cfg.backbone, input_size=cfg.input_size))

    def test_variant_alias(self):
        full = build_variant("deeper_mou_mdsc", base_width=4, cap=32, input_size=128)
        direct = build_nunet(NUNetConfig.canonical(base_width=4, cap=32, input_size=128))
        assert count_params(full) == count_params(direct)
        sd_a, sd_b = full.state_dict(), direct.state_dict()
        assert list(sd_a) == list(sd_b)
        assert all(sd_a[k].shape == sd_b[k].shape for k in sd_a)

    def test_unknown_variant_lists_names(self):
        with pytest.raises(ConfigError, match="unet.*deeper.*deeper_mou"):
            build_variant("resnet")

    def test_build_determinism(self):
        cfg = small_config(mdsc=(1,))
        a, b = build_nunet(cfg), build_nunet(cfg)
        sa, sb = a.state_dict(), b.state_dict()
        assert list(sa) == list(sb)
        assert all(torch.equal(sa[k], sb[k]) for k in sa)

    def test_forward_determinism(self):
        cfg = small_config(mdsc=(1,))
        x = torch.rand(1, 1, 32, 32)
        a, b = build_nunet(cfg).eval(), build_nunet(cfg).eval()
        with torch.no_grad():
            assert torch.equal(a(x), b(x))

    def test_degenerate_mous_param_delta_by_hand(self):
        # every MOU at depth 1 and no intermediate routing adds, per stage i:
        # one conv block (9c^2 + 3c) plus the widened first decoder conv (9c^2)
        base = small_config(mou=(), mdsc=())
        degenerate = small_config(mou="ones", mdsc=())
        widths = [base.backbone.channels.width(i)
                  for i in range(1, base.backbone.levels)]
        expected = sum((9 * c * c + 3 * c) + 9 * c * c for c in widths)
        delta = count_params(build_nunet(degenerate)) - count_params(build_nunet(base))
        assert delta == expected

    def test_gradient_reaches_every_parameter(self):
        model = build_nunet(small_config(depth=7, mdsc=(1,)))
        model.train()
        x = torch.rand(2, 1, 32, 32)
        target = (torch.rand(2, 1, 32, 32) > 0.5).float()
        prob = model(x).clamp(1e-7, 1 - 1e-7)
        loss = -(target * prob.log() + (1 - target) * (1 - prob).log()).mean()
        loss.backward()
        grads = [(name, p.grad) for name, p in model.named_parameters()]
        missing = [name for name, g in grads if g is None]
        assert missing == []
        nonzero = sum(bool(g.abs().sum() > 0) for _, g in grads)
        assert nonzero / len(grads) >= 0.99

    def test_mou_depth_exceeding_stage_budget_rejected(self):
        schedule = ChannelSchedule(4, 32)
        backbone = BackboneConfig(depth=7, channels=schedule)
        with pytest.raises(ConfigError, match="maximum"):
            NUNetConfig(backbone=backbone,
                        mous=(MOUConfig(stage_index=2, depth=3, channels=8),),
                        input_size=32)

    def test_input_channels_checked(self):
        model = build_nunet(small_config())
        with pytest.raises(ShapeError, match="input channel"):
            model(torch.rand(1, 3, 32, 32))


class TestConfigText:
    def test_round_trip_canonical(self):
        cfg = NUNetConfig.canonical()
        text = cfg.to_text()
        assert NUNetConfig.from_text(text) == cfg
        assert "mou = auto" in text
        assert "mdsc = 1-3,3-5,5-7" in text

    def test_round_trip_custom(self):
        cfg = small_config(mou="ones", mdsc=(1,))
        assert NUNetConfig.from_text(cfg.to_text()) == cfg

    def test_defaults_and_comments(self):
        cfg = NUNetConfig.from_text("# comment\ndepth = 9\nmou = none\n")
        assert cfg.backbone.depth == 9
        assert cfg.mous == ()
        assert cfg.mdscs == ()

    def test_bad_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            NUNetConfig.from_text("depth = 9\nwidth = 3\n")
        with pytest.raises(ConfigError, match="source \\+ 2"):
            NUNetConfig.from_text("depth = 15\nmdsc = 1-4\n")

    def test_fingerprint_tracks_content(self):
        a = NUNetConfig.canonical()
        b = NUNetConfig.canonical(seed=1)
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == NUNetConfig.from_text(a.to_text()).fingerprint()


class TestVariantConfigs:
    def test_ladder_structure(self):
        unet = variant_config("unet")
        deeper = variant_config("deeper")
        mou = variant_config("deeper_mou")
        full = variant_config("deeper_mou_mdsc")
        assert unet.backbone.depth == 9 and unet.mous == () and unet.mdscs == ()
        assert deeper.backbone.depth == 15 and deeper.mous == ()
        assert len(mou.mous) == 6 and mou.mdscs == ()
        assert [m.depth for m in full.mous] == [11, 9, 7, 5, 3, 1]
        assert [(c.source_stage, c.target_stage) for c in full.mdscs] == [(1, 3), (3, 5), (5, 7)]
