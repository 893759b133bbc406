import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_relative_error
from orthotalk.audio2motion import (SYNC_CLAMP, AudioEncoder, LipHead, PoseFlow, expression_loss, flow_forward,
                                    flow_inverse, gaussian_log_prob, lip_losses, modality_branch, pose_nll,
                                    pose_recon_losses, predict_expression, sample_pose, sync_loss, ExpressionHead)


def _encoder(seed=0):
    torch.manual_seed(seed)
    return AudioEncoder(26, 32).double()


def test_encode_shape_and_errors():
    enc = AudioEncoder(26, 32)
    assert enc(torch.randn(11, 26)).shape == (11, 32)
    assert enc(torch.randn(2, 11, 26)).shape == (2, 11, 32)
    with pytest.raises(ValueError):
        enc(torch.zeros(0, 26))
    with pytest.raises(ValueError):
        enc(torch.zeros(5, 20))


def test_encode_shift_equivariance_in_interior():
    enc = _encoder()
    x = torch.randn(30, 26, dtype=torch.float64)
    shifted = torch.cat([torch.randn(1, 26, dtype=torch.float64), x[:-1]])
    a, b = enc(x), enc(shifted)
    assert torch.allclose(a[4:25], b[5:26], atol=1e-12)


def test_encode_matches_numpy_convolution():
    enc = _encoder(1)
    x = np.random.default_rng(0).standard_normal((9, 26))
    h = x.T
    for i, conv in enumerate(enc.convs):
        w, bias = conv.weight.detach().numpy(), conv.bias.detach().numpy()
        padded = np.pad(h, ((0, 0), (1, 1)))
        out = np.stack([np.einsum("oik,ik->o", w, padded[:, t : t + 3]) for t in range(h.shape[1])], 1) + bias[:, None]
        h = np.where(out > 0, out, 0.2 * out) if i + 1 < len(enc.convs) else out
    assert np.allclose(enc(torch.from_numpy(x)).detach().numpy(), h.T, atol=1e-10)


def test_lip_head_examples():
    head = LipHead(32, 20)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    f = torch.randn(7, 32)
    assert torch.equal(head(f), torch.zeros(7, 20))
    torch.manual_seed(0)
    head.reset_parameters()
    assert torch.allclose(head(f), f @ head.weight.T + head.bias, atol=1e-6)
    with pytest.raises(ValueError):
        head(torch.randn(7, 31))


def test_sync_loss_examples():
    v = torch.tensor([[1.0, 2.0, 0.5]])
    assert sync_loss(v, v).item() == pytest.approx(0.0, abs=1e-7)
    half = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.5, math.sqrt(3) / 2]])
    assert sync_loss(*half).item() == pytest.approx(math.log(2), rel=1e-6)
    assert sync_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[-1.0, 0.2]])).item() == pytest.approx(
        -math.log(SYNC_CLAMP), rel=1e-6)
    assert sync_loss(torch.zeros(1, 3), torch.ones(1, 3)).item() == pytest.approx(-math.log(SYNC_CLAMP), rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sync_loss_range(seed):
    g = torch.Generator().manual_seed(seed)
    val = sync_loss(torch.randn(8, 5, generator=g), torch.randn(8, 5, generator=g))
    assert (val >= 0).all() and (val <= -math.log(SYNC_CLAMP) + 1e-5).all()


def test_lip_losses_direct():
    g = torch.Generator().manual_seed(0)
    w_gt, w_hat = torch.randn(4, 20, generator=g), torch.randn(4, 20, generator=g)
    img_gt, img_hat = torch.rand(4, 3, 8, 8, generator=g), torch.rand(4, 3, 8, 8, generator=g)
    v, s = torch.randn(4, 8, generator=g), torch.randn(4, 8, generator=g)
    out = lip_losses(w_gt, w_hat, img_gt, img_hat, v, s)
    assert out["fea"].item() == pytest.approx(float(np.mean(np.linalg.norm((w_gt - w_hat).numpy(), axis=1))), rel=1e-5)
    rms = np.sqrt(((img_gt - img_hat).numpy() ** 2).reshape(4, -1).mean(1)).mean()
    assert out["rec"].item() == pytest.approx(float(rms), rel=1e-5)
    assert torch.isclose(out["sync"], sync_loss(v, s).mean())
    with pytest.raises(FloatingPointError):
        lip_losses(w_gt * float("nan"), w_hat, img_gt, img_hat, v, s)


def _identity_flow(steps=1):
    flow = PoseFlow(6, 4, steps, identity_mixing=True).double()
    return flow


def _random_flow(seed=0, steps=3):
    torch.manual_seed(seed)
    flow = PoseFlow(6, 4, steps).double()
    with torch.no_grad():
        for step in flow.steps:
            step.actnorm.loc.normal_(0, 0.5)
            step.actnorm.log_scale.normal_(0, 0.3)
            step.coupling.net[-1].weight.normal_(0, 0.2)
            step.coupling.net[-1].bias.normal_(0, 0.2)
    return flow


def test_identity_flow():
    flow = _identity_flow(2)
    w, c = torch.randn(5, 6, dtype=torch.float64), torch.randn(5, 4, dtype=torch.float64)
    z, logdet = flow_inverse(flow, w, c)
    assert torch.allclose(z, w, atol=1e-12) and torch.allclose(logdet, torch.zeros(5, dtype=torch.float64))
    assert torch.allclose(flow_forward(flow, w, c), w, atol=1e-12)


def test_actnorm_only_step_at_mean():
    flow = _identity_flow(1)
    mu = torch.tensor([0.1, -0.2, 0.3, 0.0, 1.0, -1.0], dtype=torch.float64)
    delta = torch.tensor([0.5, 2.0, 1.0, 3.0, 0.25, 1.5], dtype=torch.float64)
    with torch.no_grad():
        flow.steps[0].actnorm.loc.copy_(mu)
        flow.steps[0].actnorm.log_scale.copy_(delta.log())
    c = torch.zeros(1, 4, dtype=torch.float64)
    z, logdet = flow.inverse(mu[None], c)
    assert torch.allclose(z, torch.zeros(1, 6, dtype=torch.float64))
    assert logdet.item() == pytest.approx(-delta.log().sum().item(), rel=1e-12)
    code = torch.ones(1, 6, dtype=torch.float64)
    assert torch.allclose(flow(code, c), code * delta + mu)


def test_logdet_matches_brute_force_jacobian():
    flow = _random_flow(1)
    w, c = torch.randn(6, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(lambda x: flow.inverse(x[None], c[None])[0][0], w)
    brute = torch.linalg.slogdet(jac)[1]
    _, logdet = flow.inverse(w[None], c[None])
    assert abs(logdet.item() - brute.item()) <= 1e-4 * max(1.0, abs(brute.item()))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_flow_bijectivity(seed):
    flow = _random_flow(seed % 1000)
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(7, 6, generator=g, dtype=torch.float64)
    c = torch.randn(7, 4, generator=g, dtype=torch.float64)
    z, _ = flow.inverse(w, c)
    assert (flow(z, c) - w).abs().max() <= 1e-4
    assert (flow.inverse(flow(w, c), c)[0] - w).abs().max() <= 1e-4


def test_nll_examples():
    flow = _identity_flow()
    c = torch.zeros(3, 4, dtype=torch.float64)
    assert pose_nll(flow, torch.zeros(3, 6, dtype=torch.float64), c).item() == pytest.approx(3 * math.log(2 * math.pi))
    assert 3 * math.log(2 * math.pi) == pytest.approx(5.513631, abs=1e-6)
    w = torch.randn(3, 6, dtype=torch.float64)
    assert pose_nll(flow, w, c).item() == pytest.approx(-gaussian_log_prob(w).mean().item())


def test_nll_gradient_check():
    flow = _random_flow(2)
    w, c = torch.randn(8, 6, dtype=torch.float64), torch.randn(8, 4, dtype=torch.float64)
    step = flow.steps[1]
    params = [step.coupling.net[0].weight, step.mixing.lower, step.mixing.log_s, step.actnorm.log_scale]
    assert fd_relative_error(lambda: pose_nll(flow, w, c), params) <= 1e-3


def test_flow_rejects_shapes():
    flow = PoseFlow(6, 4, 1)
    with pytest.raises(ValueError):
        flow.inverse(torch.zeros(2, 5), torch.zeros(2, 4))
    with pytest.raises(ValueError):
        flow(torch.zeros(2, 6), torch.zeros(3, 4))


def test_recon_loss_examples():
    w = torch.randn(5, 6)
    r = pose_recon_losses(w, w)
    assert r["rec"] == 0 and r["tem"] == 0
    offset = torch.tensor([3.0, 4.0, 0, 0, 0, 0])
    r = pose_recon_losses(w, w + offset)
    assert r["rec"].item() == pytest.approx(5.0, rel=1e-6) and r["tem"].item() == pytest.approx(0.0, abs=1e-6)


def test_recon_loss_direct():
    g = np.random.default_rng(3)
    a, b = g.standard_normal((6, 6)), g.standard_normal((6, 6))
    r = pose_recon_losses(torch.from_numpy(a), torch.from_numpy(b))
    assert r["rec"].item() == pytest.approx(np.linalg.norm(a - b, axis=1).mean())
    tem = np.linalg.norm(np.diff(a, axis=0) - np.diff(b, axis=0), axis=1).sum() / 5
    assert r["tem"].item() == pytest.approx(tem)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tem_is_offset_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    a, b, c = torch.randn(6, 6, generator=g), torch.randn(6, 6, generator=g), torch.randn(6, generator=g)
    assert torch.isclose(pose_recon_losses(a + c, b)["tem"], pose_recon_losses(a, b)["tem"], atol=1e-5)


def test_sample_pose_seeds():
    flow = _random_flow(3)
    c = torch.randn(10, 4, dtype=torch.float64)
    assert torch.equal(sample_pose(flow, c, 5), sample_pose(flow, c, 5))
    assert not torch.equal(sample_pose(flow, c, 5), sample_pose(flow, c, 6))


def test_branch_boundaries_and_frequencies():
    assert modality_branch(0.7) == "both" and modality_branch(0.5) == "both"
    assert modality_branch(0.3) == "audio_masked" and modality_branch(0.25) == "audio_masked"
    assert modality_branch(0.1) == "text_masked"
    with pytest.raises(ValueError):
        modality_branch(1.5)
    draws = np.random.default_rng(0).uniform(size=10_000)
    branches = [modality_branch(p) for p in draws]
    freq = [branches.count(b) / len(draws) for b in ("both", "audio_masked", "text_masked")]
    assert np.allclose(freq, [0.5, 0.25, 0.25], atol=0.02)


def test_masking_examples():
    torch.manual_seed(0)
    head = ExpressionHead(4, 3)
    a, a2, t, t2 = torch.randn(4), torch.randn(4), torch.randn(4), torch.randn(4)
    both = predict_expression(head, a, t, p_draw=0.7, training=True)
    assert not torch.equal(both, predict_expression(head, a2, t, p_draw=0.7, training=True))
    masked = predict_expression(head, a, t, p_draw=0.3, training=True)
    assert torch.equal(masked, predict_expression(head, a2, t, p_draw=0.3, training=True))
    assert torch.equal(masked, predict_expression(head, None, t))
    text_masked = predict_expression(head, a, t, p_draw=0.1, training=True)
    assert torch.equal(text_masked, predict_expression(head, a, t2, p_draw=0.1, training=True))
    assert torch.equal(text_masked, predict_expression(head, a, None))
    with pytest.raises(ValueError):
        predict_expression(head, None, None)
    with pytest.raises(ValueError):
        predict_expression(head, a, t, training=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.4999))
def test_masked_modality_invariance(seed, p):
    g = torch.Generator().manual_seed(seed)
    head = ExpressionHead(4, 3)
    a, a2, t, t2 = (torch.randn(2, 4, generator=g) for _ in range(4))
    if modality_branch(p) == "audio_masked":
        assert torch.equal(predict_expression(head, a, t, p, True), predict_expression(head, a2, t, p, True))
    else:
        assert torch.equal(predict_expression(head, a, t, p, True), predict_expression(head, a, t2, p, True))


def test_expression_loss_examples():
    w = torch.randn(10)
    assert expression_loss(w, w) == 0
    assert expression_loss(w, w - 0.5).item() == pytest.approx(0.5)
    g = np.random.default_rng(1)
    a, b = g.standard_normal(10), g.standard_normal(10)
    assert expression_loss(torch.from_numpy(a), torch.from_numpy(b)).item() == pytest.approx(np.abs(a - b).mean())


def test_sync_gradient_check():
    g = torch.Generator().manual_seed(8)
    v = torch.randn(5, 8, generator=g, dtype=torch.float64)
    s = (v + 0.5 * torch.randn(5, 8, generator=g, dtype=torch.float64)).requires_grad_()
    v.requires_grad_()
    err = fd_relative_error(lambda: sync_loss(v, s).mean(), [v, s])
    assert err <= 1e-3
