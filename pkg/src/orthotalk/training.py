"""Shared training plumbing and the autoencoder pretraining stage."""

import csv
import logging
import math
import time

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import select_trainable
from .networks import to_tensor
from .oracles import perceptual_distance

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
GRAD_CLIP = 1.0


class NumericalFailure(FloatingPointError):
    pass


def adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS)


def step(opt, loss, clip=GRAD_CLIP):
    """One clipped optimizer update; returns the pre-clip gradient norm."""
    opt.zero_grad()
    loss.backward()
    params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
    norm = torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()
    return float(norm)


def check_finite(losses, it):
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in losses.items()}
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NumericalFailure(f"non-finite loss at iteration {it}: {bad}; all terms: "
                               + ", ".join(f"{k}={v:.4g}" for k, v in values.items()))


class LossLog:
    """In-memory loss history, mirrored to CSV when a path is given."""

    def __init__(self, columns, path=None, every=1):
        self.columns = ["iter", *columns]
        self.rows = []
        self.every = every
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(self.columns)

    def add(self, it, values):
        row = [it] + [float(values[c]) for c in self.columns[1:]]
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)
            self._fh.flush()
        if it % self.every == 0:
            log.info("iter %d %s", it, " ".join(f"{c}={v:.4f}" for c, v in zip(self.columns[1:], row[1:])))

    def column(self, name):
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def d_loss(real_logits, fake_logits):
    """Discriminator side of the log-likelihood value function (logit form)."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def g_loss(fake_logits):
    """Non-saturating generator loss."""
    return F.softplus(-fake_logits).mean()


def l1(x, y):
    return (x - y).abs().mean()


def image_terms(phi, target, output):
    """(mean L1, mean perceptual distance) between batches."""
    return l1(output, target), perceptual_distance(phi, target, output).mean()


def sample_index(it, b, batch, size):
    k = it * batch + b
    return k % size, k // size


def pretrain_autoencoder(state, source, iters=None, log_path=None):
    """Stage 0: fit encoder, generator and a component-agnostic motion dictionary.

    The generator learns to render ``E(s) + dictionary(E(d))`` with identity skips
    from ``s`` as the driving frame ``d`` (plus a self-reconstruction of ``s``).  The
    objective is reconstruction only (L1 + perceptual); an adversarial term made
    this unconstrained stage collapse.  On exit the component banks are seeded with
    the dictionary rows and the autoencoder is frozen for all later stages.
    """
    cfg, model, phi = state.cfg, state.model, state.oracles.perceptual
    tr = cfg["train"]
    iters = tr["iters"] if iters is None else iters
    w = tr["loss_weights"]
    B = tr["batch"]
    opt = adam(select_trainable(model, ["encoder", "generator", "dictionary"], state.frozen), tr["lr"])
    history = LossLog(["rec", "per", "self", "total"], log_path, tr["log_every"])
    torch.manual_seed(tr["seed"])
    start = time.time()
    try:
        for it in range(iters):
            pairs = [source.stage0_pair(*sample_index(it, b, B, len(source))) for b in range(B)]
            src = to_tensor(np.stack([p[0] for p in pairs]))
            drv = to_tensor(np.stack([p[1] for p in pairs]))
            lat_s, feats_s = model.encoder(src)
            lat_d, _ = model.encoder(drv)
            out = model.generator(lat_s + model.dictionary(lat_d), feats_s)
            out_self = model.generator(lat_s + model.dictionary(lat_s), feats_s)
            rec, per = image_terms(phi, drv, out)
            rec_s, per_s = image_terms(phi, src, out_self)
            total = w["rec"] * rec + w["per"] * per + w["self"] * (rec_s + per_s)
            terms = {"rec": rec, "per": per, "self": rec_s + per_s, "total": total}
            check_finite(terms, it)
            step(opt, total)
            history.add(it, {k: v.item() for k, v in terms.items()})
    finally:
        history.close()
    model.init_banks_from_dictionary()
    state.stages.append({"stage": "pretrain-ae", "iters": iters, "seed": tr["seed"], "seconds": time.time() - start})
    state.freeze(["encoder", "generator", "dictionary"])
    return history
