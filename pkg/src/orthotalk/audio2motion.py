"""Audio-driven motion heads: lip weights, flow-sampled pose weights, expression weights.

Pose flow conventions: ``flow_inverse`` maps pose weights to codes (the density
direction, actnorm -> mixing -> coupling per step) and ``flow_forward`` is its exact
algebraic inverse (sampling direction).
"""

import math

import torch
from torch import nn
from torch.nn import functional as F

SYNC_EPS = 1e-8
SYNC_CLAMP = 1e-6
SCALE_CLAMP = 5.0


class AudioEncoder(nn.Module):
    """Temporal conv stack, one output vector per input frame (receptive field +-4 frames)."""

    def __init__(self, mel_bins=26, out_dim=32, hidden=64, layers=4):
        super().__init__()
        self.mel_bins = mel_bins
        dims = [mel_bins] + [hidden] * (layers - 1) + [out_dim]
        self.convs = nn.ModuleList(nn.Conv1d(a, b, 3, padding=1) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, audio):
        audio = torch.as_tensor(audio, dtype=self.convs[0].weight.dtype)
        squeeze = audio.dim() == 2
        if squeeze:
            audio = audio.unsqueeze(0)
        if audio.shape[-2] == 0:
            raise ValueError("audio feature sequence is empty")
        if audio.shape[-1] != self.mel_bins:
            raise ValueError(f"expected {self.mel_bins} mel bins, got {audio.shape[-1]}")
        x = audio.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i + 1 < len(self.convs):
                x = F.leaky_relu(x, 0.2)
        x = x.transpose(1, 2)
        return x.squeeze(0) if squeeze else x


class LipHead(nn.Linear):
    """Per-frame affine map from audio latents to mouth-bank weights."""

    def forward(self, f_a):
        if f_a.shape[-1] != self.in_features:
            raise ValueError(f"audio latent of width {f_a.shape[-1]}, expected {self.in_features}")
        return super().forward(f_a)


def sync_loss(v, s):
    cos = (v * s).sum(-1) / torch.clamp(v.norm(dim=-1) * s.norm(dim=-1), min=SYNC_EPS)
    return -torch.log(cos.clamp(SYNC_CLAMP, 1.0))


def lip_losses(w_gt, w_hat, img_gt, img_hat, v, s):
    """Feature L2, per-image RMS reconstruction and sync terms, each averaged over frames."""
    fea = (w_gt - w_hat).norm(dim=-1).mean()
    rec = ((img_gt - img_hat) ** 2).flatten(1).mean(1).sqrt().mean()
    sync = sync_loss(v, s).mean()
    out = {"fea": fea, "rec": rec, "sync": sync}
    for name, value in out.items():
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite lip loss {name}")
    return out


# ------------------------------------------------------------------- flow


class ActNorm(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(dim))
        self.log_scale = nn.Parameter(torch.zeros(dim))

    def initialize(self, x):
        x = x.reshape(-1, x.shape[-1])
        with torch.no_grad():
            self.loc.copy_(x.mean(0))
            self.log_scale.copy_(torch.log(x.std(0) + 1e-6))

    def inverse(self, x):
        return (x - self.loc) * torch.exp(-self.log_scale), -self.log_scale.sum().expand(x.shape[:-1])

    def forward(self, h):
        return h * torch.exp(self.log_scale) + self.loc


class InvertibleMixing(nn.Module):
    """Channel mixing ``W = P L U`` with fixed permutation and sign, so log|det W| = sum(log_s)."""

    def __init__(self, dim, identity=False):
        super().__init__()
        if identity:
            w = torch.eye(dim)
        else:
            w, _ = torch.linalg.qr(torch.randn(dim, dim))
        p, l, u = torch.linalg.lu(w)
        diag = torch.diagonal(u)
        self.register_buffer("perm", p)
        self.register_buffer("sign", torch.sign(diag))
        self.register_buffer("lower_mask", torch.tril(torch.ones(dim, dim), -1))
        self.lower = nn.Parameter(l * self.lower_mask)
        self.upper = nn.Parameter(torch.triu(u, 1))
        self.log_s = nn.Parameter(torch.log(diag.abs()))

    def factors(self):
        eye = torch.eye(len(self.log_s), dtype=self.lower.dtype)
        lower = self.lower * self.lower_mask + eye
        upper = torch.triu(self.upper, 1) + torch.diag(self.sign * torch.exp(self.log_s))
        return lower, upper

    def matrix(self):
        lower, upper = self.factors()
        return self.perm @ lower @ upper

    def inverse(self, x):
        return x @ self.matrix().T, self.log_s.sum().expand(x.shape[:-1])

    def forward(self, h):
        lower, upper = self.factors()
        flat = h.reshape(-1, h.shape[-1]).T
        y = self.perm.T @ flat
        y = torch.linalg.solve_triangular(lower, y, upper=False, unitriangular=True)
        y = torch.linalg.solve_triangular(upper, y, upper=True)
        return y.T.reshape(h.shape)


class AffineCoupling(nn.Module):
    """``z2 = (h2 + t) * s`` with ``(t, s_raw) = net(h1, audio)`` and ``s = exp(clamp(s_raw))``."""

    def __init__(self, dim, cond_dim, hidden=64):
        super().__init__()
        self.n1 = math.ceil(dim / 2)
        self.n2 = dim - self.n1
        self.net = nn.Sequential(
            nn.Linear(self.n1 + cond_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, 2 * self.n2),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def params(self, h1, cond):
        out = self.net(torch.cat([h1, cond], -1))
        t, s_raw = out[..., : self.n2], out[..., self.n2 :]
        log_s = s_raw.clamp(-SCALE_CLAMP, SCALE_CLAMP)
        return t, log_s

    def inverse(self, x, cond):
        h1, h2 = x[..., : self.n1], x[..., self.n1 :]
        t, log_s = self.params(h1, cond)
        return torch.cat([h1, (h2 + t) * torch.exp(log_s)], -1), log_s.sum(-1)

    def forward(self, z, cond):
        z1, z2 = z[..., : self.n1], z[..., self.n1 :]
        t, log_s = self.params(z1, cond)
        return torch.cat([z1, z2 * torch.exp(-log_s) - t], -1)


class FlowStep(nn.Module):
    def __init__(self, dim, cond_dim, hidden=64, identity_mixing=False):
        super().__init__()
        self.actnorm = ActNorm(dim)
        self.mixing = InvertibleMixing(dim, identity=identity_mixing)
        self.coupling = AffineCoupling(dim, cond_dim, hidden)

    def inverse(self, x, cond):
        h, ld1 = self.actnorm.inverse(x)
        h, ld2 = self.mixing.inverse(h)
        z, ld3 = self.coupling.inverse(h, cond)
        return z, ld1 + ld2 + ld3

    def forward(self, z, cond):
        return self.actnorm(self.mixing(self.coupling(z, cond)))


class PoseFlow(nn.Module):
    def __init__(self, dim=6, cond_dim=32, steps=4, hidden=64, identity_mixing=False):
        super().__init__()
        self.dim = dim
        self.cond_dim = cond_dim
        self.steps = nn.ModuleList(FlowStep(dim, cond_dim, hidden, identity_mixing) for _ in range(steps))

    def _check(self, x, cond):
        if x.shape[-1] != self.dim or cond.shape[-1] != self.cond_dim or x.shape[:-1] != cond.shape[:-1]:
            raise ValueError(f"flow shapes {tuple(x.shape)} / {tuple(cond.shape)} do not match")

    def inverse(self, w, cond):
        """Pose weights -> (codes, per-frame log|det dz/dw|)."""
        self._check(w, cond)
        logdet = torch.zeros(w.shape[:-1], dtype=w.dtype)
        z = w
        for step in self.steps:
            z, ld = step.inverse(z, cond)
            logdet = logdet + ld
        if not torch.isfinite(z).all():
            raise FloatingPointError("non-finite flow output")
        return z, logdet

    def forward(self, z, cond):
        """Codes -> pose weights."""
        self._check(z, cond)
        w = z
        for step in reversed(self.steps):
            w = step(w, cond)
        if not torch.isfinite(w).all():
            raise FloatingPointError("non-finite flow output")
        return w

    def initialize(self, w, cond):
        """Data-dependent actnorm init, step by step (the first step sees the raw weight statistics)."""
        with torch.no_grad():
            x = w
            for step in self.steps:
                step.actnorm.initialize(x)
                x, _ = step.inverse(x, cond)


def flow_inverse(flow, w, cond):
    return flow.inverse(w, cond)


def flow_forward(flow, z, cond):
    return flow(z, cond)


def gaussian_log_prob(z):
    return -0.5 * (z**2).sum(-1) - 0.5 * z.shape[-1] * math.log(2 * math.pi)


def pose_nll(flow, w, cond):
    """Per-frame negative log-likelihood (change of variables included), averaged over frames."""
    z, logdet = flow.inverse(w, cond)
    return -(gaussian_log_prob(z) + logdet).mean()


def pose_recon_losses(w_gt, w_hat):
    rec = (w_gt - w_hat).norm(dim=-1).mean()
    n = w_gt.shape[-2]
    if n < 2:
        tem = torch.zeros((), dtype=w_gt.dtype)
    else:
        d_gt = w_gt[..., 1:, :] - w_gt[..., :-1, :]
        d_hat = w_hat[..., 1:, :] - w_hat[..., :-1, :]
        tem = (d_gt - d_hat).norm(dim=-1).mean()
    return {"rec": rec, "tem": tem}


def sample_pose(flow, cond, seed, temperature=1.0):
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(cond.shape[:-1] + (flow.dim,), generator=gen, dtype=cond.dtype) * temperature
    return flow(z, cond)


# -------------------------------------------------------------- expression

BRANCHES = ("both", "audio_masked", "text_masked")


def modality_branch(p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    if p >= 0.5:
        return "both"
    if p >= 0.25:
        return "audio_masked"
    return "text_masked"


class ExpressionHead(nn.Module):
    def __init__(self, embed_dim=16, n_bases=10):
        super().__init__()
        self.embed_dim = embed_dim
        self.fc = nn.Linear(2 * embed_dim, n_bases)

    def forward(self, audio_emb, text_emb):
        return self.fc(torch.cat([audio_emb, text_emb], -1))


def predict_expression(head, audio_emb, text_emb, p_draw=None, training=False):
    """Expression weights from (semantics, text) embeddings with modality masking.

    In training the branch follows ``p_draw``; at inference a missing (``None``)
    modality is masked.  Masking substitutes a zero embedding.
    """
    if audio_emb is None and text_emb is None:
        raise ValueError("both modalities are absent")
    ref = audio_emb if audio_emb is not None else text_emb
    zeros = torch.zeros(ref.shape[:-1] + (head.embed_dim,), dtype=ref.dtype)
    mask_audio = audio_emb is None
    mask_text = text_emb is None
    if training:
        if p_draw is None:
            raise ValueError("training mode needs p_draw")
        branch = modality_branch(p_draw)
        mask_audio = mask_audio or branch == "audio_masked"
        mask_text = mask_text or branch == "text_masked"
        if mask_audio and mask_text:
            mask_audio = mask_text = False
            if audio_emb is None:
                mask_audio = True
            else:
                mask_text = True
    a = zeros if mask_audio else audio_emb
    t = zeros if mask_text else text_emb
    return head(a, t)


def expression_loss(w_gt, w_hat):
    return (w_gt - w_hat).abs().mean()


class AudioToMotion(nn.Module):
    def __init__(self, mel_bins=26, audio_dim=32, bank_sizes=None, flow_steps=4, text_dim=16):
        super().__init__()
        bank_sizes = bank_sizes or {"mouth": 20, "pose": 6, "expression": 10}
        self.encoder = AudioEncoder(mel_bins, audio_dim)
        self.lip_head = LipHead(audio_dim, bank_sizes["mouth"])
        self.pose_flow = PoseFlow(bank_sizes["pose"], audio_dim, flow_steps)
        self.expression_head = ExpressionHead(text_dim, bank_sizes["expression"])
