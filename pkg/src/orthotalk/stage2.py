"""Expression decoupling by self-reconstruction complementary learning."""

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import select_trainable
from .model import window_average_expression
from .networks import Discriminator, to_tensor
from .training import LossLog, adam, check_finite, d_loss, g_loss, image_terms, sample_index, step

COS_EPS = 1e-8
STAGE2_PARAMS = ["navigation.heads.expression", "navigation.raw.expression", "eem"]

__all__ = [
    "STAGE2_PARAMS", "Stage2Losses", "expression_probe_error", "motion_loss", "mouth_consistency_loss",
    "stage2_forward", "train_stage2", "window_average_expression", "window_batch",
]


@dataclass
class Stage2Losses:
    rec: torch.Tensor
    per: torch.Tensor
    adv_g: torch.Tensor
    adv_d: torch.Tensor
    mot: torch.Tensor
    m_c: torch.Tensor
    total: torch.Tensor

    def as_dict(self):
        return {"rec": self.rec, "per": self.per, "adv_g": self.adv_g, "adv_d": self.adv_d,
                "mot": self.mot, "m_c": self.m_c, "total": self.total}


def window_indices(length, K, rng):
    half = K // 2
    if length < K:
        raise ValueError(f"clip of {length} frames is shorter than the window ({K})")
    c = int(rng.integers(half, length - half))
    return c, list(range(c - half, c + half + 1))


def window_batch(source, items, K):
    """Driving frames, their K-frame windows and neutral identity frames for ``(clip, draw)`` items."""
    drv, win, ident, valence = [], [], [], []
    for i, draw in items:
        clip = source.clip(i)
        c, idx = window_indices(len(clip), K, np.random.default_rng([i, draw, 5]))
        drv.append(clip.frames[c])
        win.append(clip.frames[idx])
        ident.append(source.identity_frame(i, draw))
        valence.append(clip.attrs[c].normalized()[2])
    B = len(items)
    window = to_tensor(np.concatenate(win)).view(B, K, 3, *drv[0].shape[:2])
    return {"driving": to_tensor(np.stack(drv)), "window": window,
            "identity": to_tensor(np.stack(ident)), "valence": torch.tensor(valence)}


def window_expression(model, window, banks=None):
    """ELN features averaged over each window (B x K x 3 x H x W)."""
    B, K = window.shape[:2]
    lat, _ = model.encoder(window.flatten(0, 1))
    return window_average_expression(model, lat.view(B, K, -1), banks)


def motion_loss(target, output, probe):
    """Unsquared L2 distance of motion readouts plus that of emotion readouts, batch mean."""
    phi = (probe.motion(target) - probe.motion(output)).norm(dim=-1)
    psi = (probe.emotion(target) - probe.emotion(output)).norm(dim=-1)
    return (phi + psi).mean()


def mouth_consistency_loss(model, output, driving, banks=None):
    banks = model.banks() if banks is None else banks
    m_out = model.motion("mouth", model.encoder(output)[0], banks)
    m_drv = model.motion("mouth", model.encoder(driving)[0], banks)
    return torch.exp(-F.cosine_similarity(m_out, m_drv, dim=-1, eps=COS_EPS)).mean()


def reenact(model, batch, banks=None):
    """Drive the identity frame with the driving frame's mouth/pose and the window's expression."""
    banks = model.banks() if banks is None else banks
    lat_d, _ = model.encoder(batch["driving"])
    motion = model.motion("pose", lat_d, banks) + model.motion("mouth", lat_d, banks)
    f_exp = window_expression(model, batch["window"], banks)
    lat_i, feats_i = model.encoder(batch["identity"])
    return model.render(lat_i, feats_i, motion, f_exp)


def stage2_forward(model, batch, oracles, weights=None):
    w = {"rec": 1.0, "per": 1.0, "adv": 1.0, "mot": 10.0, "m_c": 1.0} | dict(weights or {})
    banks = model.banks()
    out = reenact(model, batch, banks)
    target = batch["driving"]
    rec, per = image_terms(oracles.perceptual, target, out)
    adv_g = g_loss(model.discriminator(out))
    adv_d = d_loss(model.discriminator(target), model.discriminator(out.detach()))
    mot = motion_loss(target, out, oracles.probe)
    m_c = mouth_consistency_loss(model, out, target, banks)
    total = w["rec"] * rec + w["per"] * per + w["adv"] * adv_g + w["mot"] * mot + w["m_c"] * m_c
    return Stage2Losses(rec, per, adv_g, adv_d, mot, m_c, total), out


@torch.no_grad()
def expression_probe_error(model, probe, batch, chunk=32):
    """Mean |emotion readout of the reenacted frame - true normalized valence|."""
    errs = []
    n = len(batch["driving"])
    for s in range(0, n, chunk):
        part = {k: v[s : s + chunk] for k, v in batch.items()}
        out = reenact(model, part)
        errs.append((probe.emotion(out)[:, 0] - part["valence"]).abs())
    return float(torch.cat(errs).mean())


def reset_discriminator(model, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        fresh = Discriminator(model.image_size, tuple(model.model_cfg["channels"]))
    model.discriminator.load_state_dict(fresh.state_dict())


def train_stage2(state, source, iters=None, log_path=None, heldout=None, probe_at=50):
    """Train ELN (head and expression bank rows) and EEM with everything else frozen.

    ``heldout`` is an optional window batch on which the expression-probe error is
    measured at iteration ``probe_at`` and at the end; both land in the stage record.
    """
    state.require("train-stage1")
    cfg, model, oracles = state.cfg, state.model, state.oracles
    oracles.require_probe()
    tr = cfg["train"]
    iters = tr["iters"] if iters is None else iters
    B, K = tr["batch"], cfg["model"]["window_K"]
    params = select_trainable(model, STAGE2_PARAMS, state.frozen)
    opt = adam(params, tr["lr"])
    if iters > 0:
        reset_discriminator(model, tr["seed"] + 1)
    d_params = list(model.discriminator.parameters())
    for p in d_params:
        p.requires_grad_(True)
    opt_d = adam(d_params, tr["lr"])
    history = LossLog(["rec", "per", "adv_g", "adv_d", "mot", "m_c", "total"], log_path, tr["log_every"])
    record = {"stage": "train-stage2", "iters": iters, "seed": tr["seed"]}
    torch.manual_seed(tr["seed"])
    start = time.time()
    try:
        for it in range(iters):
            if heldout is not None and it == probe_at:
                record["probe_error_baseline"] = expression_probe_error(model, oracles.probe, heldout)
            batch = window_batch(source, [sample_index(it, b, B, len(source)) for b in range(B)], K)
            losses, _ = stage2_forward(model, batch, oracles, tr["loss_weights"])
            terms = losses.as_dict()
            check_finite(terms, it)
            step(opt, losses.total)
            step(opt_d, losses.adv_d)
            history.add(it, {k: v.item() for k, v in terms.items()})
    finally:
        history.close()
    if heldout is not None:
        record["probe_error_final"] = expression_probe_error(model, oracles.probe, heldout)
    record["seconds"] = time.time() - start
    state.stages.append(record)
    state.freeze(STAGE2_PARAMS)
    return history
