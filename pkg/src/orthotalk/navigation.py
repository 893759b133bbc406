"""Component-aware latent navigation: orthonormal basis banks and weight heads.

The three banks (mouth, pose, expression) are views into one orthonormal
family obtained by QR of a shared raw parameter matrix, so intra- and
inter-bank orthogonality hold by construction rather than by penalty.  Each
bank owns its own slice of raw rows so stages can freeze banks independently.
"""

from dataclasses import dataclass

import torch
from torch import nn

BANK_ORDER = ("mouth", "pose", "expression")
JITTER = 1e-8
RANK_TOL = 1e-6


class DimensionalityError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _qr_rows(raw):
    """Orthonormal rows spanning ``raw`` (Gram-Schmidt order), diag of R forced positive."""
    n, d = raw.shape
    if n > d:
        raise DimensionalityError(f"cannot fit {n} orthogonal rows in dimension {d}")
    scale = raw.detach().abs().max().clamp_min(1e-30)
    svals = torch.linalg.svdvals(raw.detach() / scale)
    if svals.numel() and svals.min() < RANK_TOL * svals.max():
        raw = raw + JITTER * scale * torch.eye(n, d, dtype=raw.dtype, device=raw.device)
    q, r = torch.linalg.qr(raw.transpose(0, 1), mode="reduced")
    diag = torch.diagonal(r)
    if diag.numel() and (diag.abs().min() < RANK_TOL * diag.abs().max() or not torch.isfinite(diag).all()):
        raise NumericalError("raw bank parameters are rank deficient")
    sign = torch.where(diag < 0, -torch.ones_like(diag), torch.ones_like(diag))
    return (q * sign).transpose(0, 1)


def orthonormalize(raw):
    """Map an ``n x d`` raw matrix to ``n`` orthonormal rows (differentiable)."""
    if raw.dim() != 2:
        raise ValueError("raw params must be a matrix")
    return _qr_rows(raw)


def orthonormalize_blocks(blocks):
    """Block Gram-Schmidt over ``blocks``; equals ``orthonormalize(cat(blocks))`` in exact arithmetic.

    Each block's output depends only on itself and earlier blocks, which keeps
    frozen leading banks bit-stable while later banks train.
    """
    total = sum(b.shape[0] for b in blocks)
    d = blocks[0].shape[1]
    if total > d:
        raise DimensionalityError(f"cannot fit {total} orthogonal rows in dimension {d}")
    done = []
    for block in blocks:
        x = block
        if done:
            prev = torch.cat(done, 0)
            for _ in range(2):  # re-orthogonalize once; twice is enough
                x = x - (x @ prev.transpose(0, 1)) @ prev
        done.append(_qr_rows(x))
    return done


@dataclass
class BasisBank:
    label: str
    bases: torch.Tensor  # n x d

    @property
    def size(self):
        return self.bases.shape[0]


@dataclass
class MotionWeights:
    label: str
    values: torch.Tensor


def _weights_tensor(bank, weights):
    if isinstance(weights, MotionWeights):
        if weights.label != bank.label:
            raise ValueError(f"{weights.label} weights used with {bank.label} bank")
        weights = weights.values
    if weights.shape[-1] != bank.size:
        raise ValueError(f"weights of length {weights.shape[-1]} for bank of size {bank.size}")
    return weights


def navigate(bank: BasisBank, weights):
    """Weighted sum of the bank's bases; works on a trailing weight axis."""
    return _weights_tensor(bank, weights) @ bank.bases


def project(latent, bank: BasisBank):
    """Coordinates of ``latent`` on the bank's rows (inverse of ``navigate`` on its span)."""
    return latent @ bank.bases.transpose(0, 1)


def combine_motion(f_m, f_p, f_e):
    if not (f_m.shape == f_p.shape == f_e.shape):
        raise ValueError(f"latent shapes differ: {tuple(f_m.shape)}, {tuple(f_p.shape)}, {tuple(f_e.shape)}")
    return f_m + f_p + f_e


def interpolate_expression(w1, w2, alpha):
    """``alpha * w1 + (1 - alpha) * w2``; the endpoints return the inputs untouched."""
    if not 0.0 <= float(alpha) <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    labels = {getattr(w, "label", "expression") for w in (w1, w2)}
    if labels != {"expression"}:
        raise ValueError(f"expected expression weights, got {sorted(labels)}")
    v1 = w1.values if isinstance(w1, MotionWeights) else w1
    v2 = w2.values if isinstance(w2, MotionWeights) else w2
    if v1.shape != v2.shape:
        raise ValueError("weight shapes differ")
    if alpha == 1:
        out = v1.clone()
    elif alpha == 0:
        out = v2.clone()
    else:
        out = alpha * v1 + (1 - alpha) * v2
    return MotionWeights("expression", out) if isinstance(w1, MotionWeights) else out


class NavigationHead(nn.Module):
    """Two affine layers with a SiLU between; raw (unnormalized) weights out."""

    def __init__(self, latent_dim, n_bases, hidden=None):
        super().__init__()
        hidden = hidden or latent_dim
        self.latent_dim = latent_dim
        self.n_bases = n_bases
        self.fc1 = nn.Linear(latent_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_bases)

    def forward(self, latent):
        if latent.shape[-1] != self.latent_dim:
            raise ValueError(f"latent of length {latent.shape[-1]}, head expects {self.latent_dim}")
        return self.fc2(nn.functional.silu(self.fc1(latent)))


def predict_weights(head: NavigationHead, latent):
    return head(latent)


class LatentNavigation(nn.Module):
    """The three banks (one raw slice each) and their weight heads."""

    def __init__(self, latent_dim=64, bank_sizes=None):
        super().__init__()
        bank_sizes = dict(bank_sizes or {"mouth": 20, "pose": 6, "expression": 10})
        total = sum(bank_sizes[k] for k in BANK_ORDER)
        if total > latent_dim:
            raise DimensionalityError(f"{total} bases do not fit in latent dimension {latent_dim}")
        self.latent_dim = latent_dim
        self.bank_sizes = {k: int(bank_sizes[k]) for k in BANK_ORDER}
        self.raw = nn.ParameterDict(
            {k: nn.Parameter(torch.randn(self.bank_sizes[k], latent_dim) / latent_dim**0.5) for k in BANK_ORDER}
        )
        self.heads = nn.ModuleDict({k: NavigationHead(latent_dim, self.bank_sizes[k]) for k in BANK_ORDER})

    def banks(self):
        bases = orthonormalize_blocks([self.raw[k] for k in BANK_ORDER])
        return {k: BasisBank(k, b) for k, b in zip(BANK_ORDER, bases)}

    def all_bases(self):
        return torch.cat([b.bases for b in self.banks().values()], 0)

    def weights(self, label, latent):
        return self.heads[label](latent)

    def features(self, label, latent, banks=None):
        """CLN: latent toward canonical -> motion offset from canonical."""
        banks = self.banks() if banks is None else banks
        return navigate(banks[label], self.weights(label, latent))

    def set_raw(self, matrix):
        """Overwrite all raw rows (mouth, pose, expression order) from one matrix."""
        start = 0
        with torch.no_grad():
            for k in BANK_ORDER:
                n = self.bank_sizes[k]
                self.raw[k].copy_(matrix[start : start + n])
                start += n
