import math

import pytest
import torch

from domain.errors import ConfigurationError, ValidationError
from domain.models import BackboneOutput
from model.hs_fpn import (
    FPN, HSFPN, PAFPN, ChannelAttention, DimensionMatch, SelectiveFeatureFusion, build_neck, masked_global_pool,
)


def _features(sizes=((16, 16), (8, 8), (4, 4), (2, 2)), channels=(512, 1024, 2048, 2048)):
    levels = [torch.randn(1, c, h, w) for c, (h, w) in zip(channels, sizes)]
    masks = [torch.zeros(1, h, w, dtype=torch.bool) for h, w in sizes]
    return BackboneOutput(levels=levels, masks=masks)


def _identity_attention(channels):
    ca = ChannelAttention(channels, reduction=1)
    with torch.no_grad():
        for conv in (ca.transform[0], ca.transform[2]):
            conv.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
            conv.bias.zero_()
    return ca


def _saturate(sff, bias):
    with torch.no_grad():
        last = sff.ca.transform[2]
        last.weight.zero_()
        last.bias.fill_(bias)


def test_weights_in_open_interval():
    ca = ChannelAttention(8)
    weights = ca(torch.randn(2, 8, 5, 6) * 10)
    assert weights.shape == (2, 8, 1, 1)
    assert ((weights > 0) & (weights < 1)).all()


def test_constant_map_pools_to_constant():
    x = torch.tensor([1.5, -2.0, 3.0]).view(1, 3, 1, 1).expand(1, 3, 4, 4)
    avg, mx = masked_global_pool(x)
    assert torch.allclose(avg.flatten(), torch.tensor([1.5, -2.0, 3.0]))
    assert torch.allclose(mx.flatten(), torch.tensor([1.5, -2.0, 3.0]))


def test_hand_computed_channel_weights():
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]], [[0.5, 0.5], [0.5, 1.5]]])[None]
    weights = _identity_attention(2)(x).flatten()
    expected = torch.tensor([1 / (1 + math.exp(-6.5)), 1 / (1 + math.exp(-2.25))])
    assert torch.allclose(weights, expected, atol=1e-6)


def test_masked_positions_ignored_by_pooling():
    x = torch.randn(1, 2, 4, 4)
    mask = torch.zeros(1, 4, 4, dtype=torch.bool)
    mask[:, :, 2:] = True
    x_padded = x.clone()
    x_padded[:, :, :, 2:] = 1e6
    avg, mx = masked_global_pool(x_padded, mask)
    valid = x[:, :, :, :2]
    assert torch.allclose(avg, valid.mean(dim=(2, 3), keepdim=True))
    assert torch.allclose(mx, valid.amax(dim=(2, 3), keepdim=True))


def test_fully_masked_map_rejected():
    ca = ChannelAttention(4)
    with pytest.raises(ValidationError):
        ca(torch.randn(1, 4, 3, 3), torch.ones(1, 3, 3, dtype=torch.bool))


@pytest.mark.parametrize("channels,size", [(1024, 16), (512, 32), (2048, 4)])
def test_dimension_match_shape(channels, size):
    out = DimensionMatch(channels)(torch.randn(1, channels, size, size))
    assert out.shape == (1, 256, size, size)


def test_dimension_match_rejects_unexpected_channels():
    with pytest.raises(ConfigurationError):
        DimensionMatch(300)
    dm = DimensionMatch(512)
    with pytest.raises(ConfigurationError):
        dm(torch.randn(1, 1024, 4, 4))


def test_dimension_match_identity():
    dm = DimensionMatch(256, 256, accepted=(256,))
    with torch.no_grad():
        dm.proj.weight.copy_(torch.eye(256).view(256, 256, 1, 1))
        dm.proj.bias.zero_()
    x = torch.randn(1, 256, 5, 5)
    assert torch.allclose(dm(x), x, atol=1e-6)


def test_sff_zero_low_returns_attention_feature():
    sff = SelectiveFeatureFusion(256)
    f_high = torch.randn(1, 256, 8, 8)
    f_low = torch.zeros(1, 256, 16, 16)
    out = sff(f_high, f_low)
    assert torch.equal(out, sff.upsample(f_high, (16, 16)))


def test_sff_saturated_attention_is_additive():
    sff = SelectiveFeatureFusion(256)
    _saturate(sff, 20.0)
    f_high, f_low = torch.randn(1, 256, 4, 4), torch.randn(1, 256, 8, 8)
    out = sff(f_high, f_low)
    expected = f_low + sff.upsample(f_high, (8, 8))
    assert (out - expected).abs().max() < 1e-4


def test_sff_closed_attention_drops_low_feature():
    sff = SelectiveFeatureFusion(256)
    _saturate(sff, -20.0)
    f_high, f_low = torch.randn(1, 256, 4, 4), torch.randn(1, 256, 8, 8)
    out = sff(f_high, f_low)
    assert (out - sff.upsample(f_high, (8, 8))).abs().max() < 1e-4


def test_sff_reconstruction():
    sff = SelectiveFeatureFusion(256)
    f_high, f_low = torch.randn(2, 256, 3, 5), torch.randn(2, 256, 6, 9)
    out = sff(f_high, f_low)
    f_att = sff.upsample(f_high, (6, 9))
    assert torch.allclose(out - f_att, f_low * sff.ca(f_att), atol=1e-5)


@pytest.mark.parametrize("high,low", [((8, 8), (16, 16)), ((3, 4), (5, 7))])
def test_sff_output_on_low_grid(high, low):
    for mode in ("bl", "tconv_bl"):
        sff = SelectiveFeatureFusion(256, mode=mode)
        out = sff(torch.randn(1, 256, *high), torch.randn(1, 256, *low))
        assert out.shape == (1, 256, *low)


def test_tconv_doubles_size():
    sff = SelectiveFeatureFusion(256, mode="tconv_bl")
    assert sff.tconv(torch.randn(1, 256, 8, 8)).shape[-2:] == (16, 16)


def test_sff_channel_mismatch():
    sff = SelectiveFeatureFusion(256)
    with pytest.raises(ValidationError):
        sff(torch.randn(1, 128, 4, 4), torch.randn(1, 256, 8, 8))


def test_unknown_upsampling_mode():
    with pytest.raises(ConfigurationError):
        SelectiveFeatureFusion(256, mode="nearest")


def test_pyramid_shapes_and_finiteness():
    neck = HSFPN()
    features = _features()
    out = neck(features)
    assert len(out.levels) == 4
    assert [f.shape[1] for f in out.levels] == [256] * 4
    assert out.spatial_shapes == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert out.strides == (8, 16, 32, 64)
    assert all(torch.isfinite(f).all() for f in out.levels)


def test_coarsest_level_is_only_screened():
    neck = HSFPN()
    features = _features()
    out = neck(features)
    f, m = features.levels[3], features.masks[3]
    expected = neck.match[3](f * neck.select[3](f, m))
    assert torch.allclose(out.levels[3], expected, atol=1e-5)


def test_fusion_modes_differ():
    torch.manual_seed(1)
    bl = HSFPN(mode="bl")
    tconv = HSFPN(mode="tconv_bl")
    tconv.load_state_dict(bl.state_dict(), strict=False)
    features = _features()
    a = bl(features)
    b = tconv(features)
    assert torch.allclose(a.levels[3], b.levels[3])
    assert not torch.allclose(a.levels[0], b.levels[0])


@pytest.mark.parametrize("neck_cls", [FPN, PAFPN])
def test_baseline_pyramids(neck_cls):
    out = neck_cls()(_features())
    assert [tuple(f.shape[1:]) for f in out.levels] == [(256, 16, 16), (256, 8, 8), (256, 4, 4), (256, 2, 2)]


def test_build_neck_variants():
    assert isinstance(build_neck("hsfpn"), HSFPN)
    assert isinstance(build_neck("fpn"), FPN)
    assert isinstance(build_neck("pafpn"), PAFPN)
    for variant in ("bifpn", "fapn", "unknown"):
        with pytest.raises(ConfigurationError):
            build_neck(variant)


def test_wrong_level_count():
    features = _features()
    features.levels = features.levels[:3]
    with pytest.raises(ValidationError):
        HSFPN()(features)
