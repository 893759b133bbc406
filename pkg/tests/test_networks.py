import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_relative_error
from orthotalk.networks import (Discriminator, EmotionEnhancement, Encoder, Generator, adain_modulate, to_frames,
                                to_tensor)

CH = (4, 8)


def test_to_tensor_round_trip(rng):
    frames = rng.uniform(-1, 1, (3, 8, 8, 3)).astype(np.float32)
    t = to_tensor(frames)
    assert t.shape == (3, 3, 8, 8)
    assert np.array_equal(to_frames(t), frames)


def test_encode_deterministic_and_shaped():
    torch.manual_seed(0)
    enc = Encoder(8, CH, 16)
    x = torch.rand(2, 3, 8, 8) * 2 - 1
    lat1, feats1 = enc(x)
    lat2, feats2 = enc(x)
    assert lat1.shape == (2, 16)
    assert torch.equal(lat1, lat2) and all(torch.equal(a, b) for a, b in zip(feats1, feats2))
    assert [f.shape[1] for f in feats1] == list(CH)
    assert [f.shape[-1] for f in feats1] == [4, 2]


def test_encode_is_not_constant():
    torch.manual_seed(1)
    enc = Encoder(8, CH, 16)
    x = torch.zeros(1, 3, 8, 8)
    y = x.clone()
    y[0, 1, 3, 4] = 0.5
    assert not torch.equal(enc(x)[0], enc(y)[0])


def test_encode_rejects_resolution():
    with pytest.raises(ValueError):
        Encoder(8, CH, 16)(torch.zeros(1, 3, 16, 16))


def test_adain_identity_style_standardizes():
    x = torch.randn(2, 3, 5, 5) * 4 + 2
    out = adain_modulate(x, torch.ones(2, 3), torch.zeros(2, 3))
    assert torch.allclose(out.mean((2, 3)), torch.zeros(2, 3), atol=1e-5)
    assert torch.allclose(out.std((2, 3), unbiased=False), torch.ones(2, 3), atol=1e-4)


def test_adain_direct_arithmetic():
    x = torch.tensor([1.0, 3.0]).view(1, 1, 1, 2)
    out = adain_modulate(x, torch.tensor([[2.0]]), torch.tensor([[5.0]]))
    assert torch.allclose(out.flatten(), torch.tensor([3.0, 7.0]), atol=1e-6)


def test_adain_constant_channel_gives_bias():
    x = torch.full((1, 2, 3, 3), 4.0)
    out = adain_modulate(x, torch.tensor([[3.0, -2.0]]), torch.tensor([[0.5, 1.5]]))
    assert torch.allclose(out[0, 0], torch.full((3, 3), 0.5))
    assert torch.allclose(out[0, 1], torch.full((3, 3), 1.5))


def test_adain_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        adain_modulate(torch.randn(1, 3, 4, 4), torch.ones(1, 2), torch.zeros(1, 2))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adain_statistics_property(seed):
    g = torch.Generator().manual_seed(seed)
    c = int(torch.randint(1, 9, (1,), generator=g))
    x = torch.randn(2, c, 6, 6, generator=g, dtype=torch.float64) * 3 + torch.randn(1, generator=g, dtype=torch.float64)
    scale = torch.randn(2, c, generator=g, dtype=torch.float64) * 2
    bias = torch.randn(2, c, generator=g, dtype=torch.float64) * 2
    out = adain_modulate(x, scale, bias)
    assert torch.allclose(out.mean((2, 3)), bias, atol=1e-4)
    assert torch.allclose(out.std((2, 3), unbiased=False), scale.abs(), atol=1e-3)


def test_eem_initial_style_is_unit_scale_zero_bias():
    eem = EmotionEnhancement(16, (8, 4))
    styles = eem(torch.randn(3, 16))
    for (scale, bias), c in zip(styles, (8, 4)):
        assert torch.equal(scale, torch.ones(3, c)) and torch.equal(bias, torch.zeros(3, c))
    assert all(torch.equal(g, torch.zeros_like(g)) for g in eem.gains)


def test_eem_affine_evaluation():
    torch.manual_seed(2)
    eem = EmotionEnhancement(6, (4,))
    for p in eem.affines.parameters():
        torch.nn.init.normal_(p)
    fc = eem.affines[0]
    scale0, bias0 = eem(torch.zeros(6))[0]
    assert torch.equal(scale0, 1 + fc.bias[:4]) and torch.equal(bias0, fc.bias[4:])
    f = torch.randn(6, dtype=torch.float64)
    out = fc.weight.double() @ f + fc.bias.double()
    scale, bias = eem.double()(f)[0]
    assert torch.allclose(scale, 1 + out[:4]) and torch.allclose(bias, out[4:])
    with pytest.raises(ValueError):
        eem(torch.zeros(5))


def _gen_inputs(seed=0):
    torch.manual_seed(seed)
    enc, gen = Encoder(8, CH, 16), Generator(8, CH, 16, eem_levels=2)
    lat, feats = enc(torch.rand(2, 3, 8, 8) * 2 - 1)
    return enc, gen, lat, feats


def test_generate_contract():
    _, gen, lat, feats = _gen_inputs()
    out = gen(lat, feats)
    assert out.shape == (2, 3, 8, 8)
    assert out.min() >= -1 and out.max() <= 1
    with pytest.raises(ValueError):
        gen(torch.zeros(2, 15), feats)


def test_generate_bypass_is_bit_identical():
    _, gen, lat, feats = _gen_inputs()
    eem = EmotionEnhancement(16, [CH[i] for i in gen.styled_levels])
    styled = gen(lat, feats, eem(torch.randn(2, 16)), eem.gains)
    assert torch.equal(styled, gen(lat, feats))


def test_style_changes_output_when_gain_open():
    _, gen, lat, feats = _gen_inputs()
    eem = EmotionEnhancement(16, [CH[i] for i in gen.styled_levels])
    with torch.no_grad():
        for g in eem.gains:
            g.fill_(1.0)
    assert not torch.equal(gen(lat, feats, eem(torch.randn(2, 16)), eem.gains), gen(lat, feats))


def test_generator_gradient_check():
    enc, gen, lat, feats = _gen_inputs(3)
    gen = gen.double()
    lat, feats = lat.detach().double(), [f.detach().double() for f in feats]
    target = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    params = [gen.fc.weight, gen.to_rgb.weight, gen.fuse[0].weight]
    err = fd_relative_error(lambda: (gen(lat, feats) - target).abs().mean(), params)
    assert err <= 1e-3


def test_adain_path_gradient_check():
    _, gen, lat, feats = _gen_inputs(4)
    gen = gen.double()
    eem = EmotionEnhancement(16, [CH[i] for i in gen.styled_levels]).double()
    with torch.no_grad():
        for p in eem.parameters():
            p.normal_(0, 0.3)
    lat, feats = lat.detach().double(), [f.detach().double() for f in feats]
    f_exp = torch.randn(2, 16, dtype=torch.float64)
    target = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    err = fd_relative_error(lambda: ((gen(lat, feats, eem(f_exp), eem.gains) - target) ** 2).mean(),
                            list(eem.parameters()))
    assert err <= 1e-3


def test_discriminator_contract():
    torch.manual_seed(0)
    d = Discriminator(8, CH).eval()
    x = torch.rand(3, 3, 8, 8)
    out = d(x)
    assert out.shape == (3,)
    assert torch.equal(out, d(x)) and torch.isfinite(out).all()
    with pytest.raises(ValueError):
        d(torch.zeros(1, 3, 16, 16))
