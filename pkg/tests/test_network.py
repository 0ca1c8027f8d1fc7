import copy
import math
import warnings

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from landslide_seg.config import NetworkConfig, desk_config
from landslide_seg.contrastive import MomentumPair
from landslide_seg.network import (
    ASPP,
    AtrousConv,
    CoordinateAttention,
    Decoder,
    HeterogeneousFeatureExtractor,
    MultiScaleFeatureExtractor,
    ProjectionHead,
    SEBlock,
    SegmentationNetwork,
    count_parameters,
)


@pytest.fixture(scope="module")
def desk_net():
    torch.manual_seed(0)
    return SegmentationNetwork(desk_config().network).eval()


# -- HFE -----------------------------------------------------------------


def test_hfe_shapes_at_512():
    cfg = desk_config().network
    hfe = HeterogeneousFeatureExtractor(cfg).eval()
    with torch.no_grad():
        out = hfe(torch.randn(1, 3, 512, 512), torch.randn(1, 1, 512, 512))
    assert out.shape == (1, cfg.hfe_out_channels, 512, 512)


def test_dem_branch_influences_fusion():
    torch.manual_seed(1)
    hfe = HeterogeneousFeatureExtractor(desk_config().network).eval()
    x = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        a = hfe(x, torch.zeros(1, 1, 32, 32))
        b = hfe(x, torch.randn(1, 1, 32, 32))
    assert not torch.allclose(a, b)


def test_hfe_eval_is_deterministic_on_zero_input():
    hfe = HeterogeneousFeatureExtractor(desk_config().network).eval()
    z3, z1 = torch.zeros(2, 3, 16, 16), torch.zeros(2, 1, 16, 16)
    with torch.no_grad():
        assert torch.equal(hfe(z3, z1), hfe(z3, z1))


def test_hfe_branch_mismatch():
    hfe = HeterogeneousFeatureExtractor(desk_config().network)
    with pytest.raises(ValueError, match="mismatch"):
        hfe(torch.zeros(1, 3, 16, 16), torch.zeros(1, 1, 8, 8))


# -- coordinate attention ------------------------------------------------


def test_saturated_ca_gates_are_identity():
    ca = CoordinateAttention(16, 4).eval()
    with torch.no_grad():
        for g in (ca.gate_h, ca.gate_w):
            g.weight.zero_()
            g.bias.fill_(60.0)
    x = torch.randn(2, 16, 5, 7, dtype=torch.float32)
    assert torch.equal(ca(x), x)


def test_ca_output_is_bounded_by_input():
    ca = CoordinateAttention(16, 4)
    x = torch.randn(2, 16, 6, 9)
    a_h, a_w = ca.gates(x)
    assert a_h.shape == (2, 16, 6, 1) and a_w.shape == (2, 16, 1, 9)
    assert torch.all((a_h > 0) & (a_h < 1)) and torch.all((a_w > 0) & (a_w < 1))
    assert torch.all(ca(x).abs() <= x.abs())


def test_ca_transposes_with_swapped_gates():
    torch.manual_seed(2)
    ca = CoordinateAttention(16, 4).double().eval()
    swapped = copy.deepcopy(ca)
    swapped.gate_h.load_state_dict(ca.gate_w.state_dict())
    swapped.gate_w.load_state_dict(ca.gate_h.state_dict())
    x = torch.randn(1, 16, 5, 8, dtype=torch.float64)
    torch.testing.assert_close(swapped(x.transpose(2, 3)), ca(x).transpose(2, 3))


def test_ca_reduction_must_divide():
    with pytest.raises(ValueError):
        CoordinateAttention(20, 8)


# -- SE ------------------------------------------------------------------


def test_saturated_se_is_identity():
    se = SEBlock(8, 4)
    with torch.no_grad():
        se.fc2.weight.zero_()
        se.fc2.bias.fill_(60.0)
    x = torch.randn(2, 8, 4, 4)
    assert torch.equal(se(x), x)


def test_se_hand_computed_two_channels():
    se = SEBlock(2, 2).double()
    with torch.no_grad():
        se.fc1.weight.copy_(torch.tensor([0.5, -0.25]).view(1, 2, 1, 1))
        se.fc1.bias.fill_(0.1)
        se.fc2.weight.copy_(torch.tensor([2.0, -1.0]).view(2, 1, 1, 1))
        se.fc2.bias.copy_(torch.tensor([0.0, 0.3], dtype=torch.float64))
    x = torch.tensor([[[[1.0, 3.0], [2.0, 2.0]], [[0.0, 4.0], [-2.0, 2.0]]]], dtype=torch.float64)
    s0, s1 = 2.0, 1.0
    z = max(0.0, 0.5 * s0 - 0.25 * s1 + 0.1)
    g0 = 1 / (1 + math.exp(-(2.0 * z)))
    g1 = 1 / (1 + math.exp(-(-1.0 * z + 0.3)))
    expected = torch.stack([x[0, 0] * g0, x[0, 1] * g1])[None]
    torch.testing.assert_close(se(x), expected, rtol=1e-12, atol=1e-12)


def test_se_equal_gates_keep_channel_order():
    se = SEBlock(4, 2)
    with torch.no_grad():
        se.fc2.weight.zero_()
        se.fc2.bias.fill_(0.3)
    x = torch.tensor([1.0, 3.0, 2.0, 5.0]).view(1, 4, 1, 1).expand(1, 4, 3, 3)
    out = se(x)[0, :, 0, 0]
    assert torch.equal(torch.argsort(out), torch.argsort(x[0, :, 0, 0]))


def test_se_reduction_must_divide():
    with pytest.raises(ValueError):
        SEBlock(10, 4)


# -- ASPP ----------------------------------------------------------------


def test_aspp_keeps_spatial_size():
    aspp = ASPP(16, 24, (6, 12, 18), 8).eval()
    with torch.no_grad():
        assert aspp(torch.randn(1, 16, 64, 64)).shape == (1, 24, 64, 64)


def test_rate_one_is_plain_conv():
    torch.manual_seed(3)
    atrous = AtrousConv(4, 6, 1).eval()
    plain = nn.Sequential(nn.Conv2d(4, 6, 3, padding=1, bias=False), nn.BatchNorm2d(6), nn.ReLU()).eval()
    plain[0].weight.data.copy_(atrous.conv.weight.data)
    plain[1].load_state_dict(atrous.bn.state_dict())
    x = torch.randn(2, 4, 9, 9)
    torch.testing.assert_close(atrous(x), plain(x))


def test_constant_input_pooling_branch():
    aspp = ASPP(4, 8, (2,), 5).eval()
    x = torch.full((1, 4, 6, 6), 1.5)
    with torch.no_grad():
        branches = aspp.branches(x)
        pooled = torch.relu(aspp.pool_conv(x[:, :, :1, :1]))
        torch.testing.assert_close(branches[-1], pooled.expand(-1, -1, 6, 6))
        cat = torch.cat(branches, dim=1)
        torch.testing.assert_close(cat[:, -5:], branches[-1])
        torch.testing.assert_close(cat[:, :5], branches[0])


def test_large_rate_warns_and_clamps():
    aspp = ASPP(4, 8, (18,), 4).eval()
    with pytest.warns(RuntimeWarning, match="clamped"):
        out = aspp(torch.randn(1, 4, 8, 8))
    assert out.shape == (1, 8, 8, 8)


# -- MAFE, projection, decoder -------------------------------------------


@pytest.mark.parametrize("size", [128, 512])
def test_mafe_output_stride_eight(size):
    cfg = desk_config().network
    mafe = MultiScaleFeatureExtractor(cfg).eval()
    with torch.no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out, b1, b2 = mafe(torch.randn(1, cfg.hfe_out_channels, size, size))
    assert out.shape == (1, cfg.encoder_out_channels, size // 8, size // 8)
    assert b1.shape[-1] == size // 4 and b2.shape[-1] == size // 8


def test_small_backbone_is_much_smaller_than_resnet101():
    small = count_parameters(MultiScaleFeatureExtractor(NetworkConfig(backbone_depth="small")))
    deep = count_parameters(MultiScaleFeatureExtractor(NetworkConfig(backbone_depth="resnet101")))
    assert deep / small > 40


def test_default_width_encoder_is_256_channels():
    net = SegmentationNetwork(NetworkConfig()).eval()
    with torch.no_grad():
        enc, emb, score = net.forward_all(torch.randn(1, 3, 128, 128), torch.randn(1, 1, 128, 128))
    assert enc.fused.shape == (1, 256, 16, 16)
    assert emb.shape == (1, 128, 16, 16)
    assert score.shape == (1, 2, 128, 128)


def test_projection_is_unit_norm():
    head = ProjectionHead(16, 32)
    emb = head(torch.randn(2, 16, 5, 5) * 100)
    torch.testing.assert_close(emb.norm(dim=1), torch.ones(2, 5, 5), atol=1e-5, rtol=0)
    zero = head(torch.zeros(1, 16, 3, 3))
    torch.testing.assert_close(zero.norm(dim=1), torch.ones(1, 3, 3), atol=1e-5, rtol=0)
    assert torch.allclose(zero[0, :, 0, 0], zero[0, :, 2, 1])


def test_projection_dim_from_config():
    net = SegmentationNetwork(NetworkConfig(**{**desk_config().network.__dict__, "projection_dim": 64}))
    with torch.no_grad():
        _, emb, _ = net.eval().forward_all(torch.randn(1, 3, 32, 32), torch.randn(1, 1, 32, 32))
    assert emb.shape[1] == 64


def test_decoder_restores_input_resolution():
    dec = Decoder(64, 16, 8).eval()
    with torch.no_grad():
        assert dec(torch.randn(1, 64, 16, 16), torch.randn(1, 16, 32, 32)).shape == (1, 2, 128, 128)
        assert dec(torch.randn(1, 64, 64, 64), torch.randn(1, 16, 128, 128)).shape == (1, 2, 512, 512)
    with pytest.raises(ValueError):
        dec(torch.randn(1, 64, 16, 16), torch.randn(1, 16, 16, 16))


def test_argmax_is_binary(desk_net):
    with torch.no_grad():
        pred = torch.softmax(desk_net(torch.randn(2, 3, 32, 32), torch.randn(2, 1, 32, 32)), 1).argmax(1)
    assert set(pred.unique().tolist()) <= {0, 1}


def test_eval_forward_is_bit_identical(desk_net):
    x, d = torch.randn(1, 3, 64, 64), torch.randn(1, 1, 64, 64)
    with torch.no_grad():
        assert torch.equal(desk_net(x, d), desk_net(x, d))


def test_input_must_be_multiple_of_eight(desk_net):
    with pytest.raises(ValueError, match="multiple of 8"):
        desk_net(torch.zeros(1, 3, 36, 36), torch.zeros(1, 1, 36, 36))


@settings(max_examples=8, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8))
def test_shape_contract_over_random_sizes(desk_net, h8, w8):
    H, W = 8 * h8, 8 * w8
    with torch.no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        enc, emb, score = desk_net.forward_all(torch.randn(1, 3, H, W), torch.randn(1, 1, H, W))
    assert enc.fused.shape[-2:] == (h8, w8)
    assert emb.shape[-2:] == (h8, w8)
    assert score.shape[-2:] == (H, W)


def test_momentum_clone_is_structurally_identical(desk_net):
    pair = MomentumPair(desk_net.encoder, desk_net.projection)
    assert count_parameters(pair.encoder_k) == count_parameters(desk_net.encoder)
    for (n1, p1), (n2, p2) in zip(desk_net.encoder.named_parameters(), pair.encoder_k.named_parameters()):
        assert n1 == n2 and p1.shape == p2.shape


# -- gradient flow --------------------------------------------------------


def _gradcheck(module, *shapes):
    torch.manual_seed(4)
    module = module.double().eval()
    inputs = tuple(torch.randn(*s, dtype=torch.float64, requires_grad=True) for s in shapes)
    assert torch.autograd.gradcheck(lambda *x: module(*x).sum(), inputs, eps=1e-6, atol=1e-5, rtol=1e-5)


def test_gradcheck_coordinate_attention():
    _gradcheck(CoordinateAttention(8, 2, min_hidden=2), (1, 8, 4, 5))


def test_gradcheck_se():
    _gradcheck(SEBlock(8, 2), (1, 8, 3, 3))


def test_gradcheck_aspp():
    _gradcheck(ASPP(4, 6, (1, 2), 3), (1, 4, 6, 6))


def test_gradcheck_hfe():
    cfg = NetworkConfig(hfe_channels=(4, 4), hfe_out_channels=4, ca_reduction=2)
    _gradcheck(HeterogeneousFeatureExtractor(cfg), (1, 3, 8, 8), (1, 1, 8, 8))


def test_gradcheck_projection_and_decoder():
    _gradcheck(ProjectionHead(6, 4), (1, 6, 3, 3))
    _gradcheck(Decoder(4, 3, 4), (1, 4, 2, 2), (1, 3, 4, 4))
