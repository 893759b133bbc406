"""Mouth/pose decoupling by cross-reconstruction of mouth-swapped composites."""

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import select_trainable
from .networks import to_tensor
from .synthdata import composite_mouth_swap
from .training import LossLog, adam, check_finite, d_loss, g_loss, image_terms, sample_index, step

COS_EPS = 1e-8
STAGE1_PARAMS = ["navigation.heads.mouth", "navigation.heads.pose", "navigation.raw.mouth", "navigation.raw.pose"]
PAIR_FIELDS = ("img_a", "img_b", "composite_ab", "composite_ba", "id_frame")

__all__ = [
    "STAGE1_PARAMS", "Stage1Losses", "composite_mouth_swap", "cross_reconstruct", "extract_swapped_features",
    "fea_loss", "pair_batch", "self_reconstruct", "stage1_losses", "train_stage1",
]


@dataclass
class Stage1Losses:
    rec: torch.Tensor
    per: torch.Tensor
    adv_g: torch.Tensor
    adv_d: torch.Tensor
    self_rec: torch.Tensor
    fea: torch.Tensor
    total: torch.Tensor

    def as_dict(self):
        return {"rec": self.rec, "per": self.per, "adv_g": self.adv_g, "adv_d": self.adv_d,
                "self": self.self_rec, "fea": self.fea, "total": self.total}


def pair_batch(pairs):
    """Stack a list of SwapPairs into NCHW tensors keyed by field name."""
    return {k: to_tensor(np.stack([getattr(p, k) for p in pairs])) for k in PAIR_FIELDS}


def extract_swapped_features(model, comp_ab, comp_ba, banks=None):
    """(f_pb, f_ma, f_pa, f_mb): pose and mouth features of each composite."""
    banks = model.banks() if banks is None else banks
    lat_ab, _ = model.encoder(comp_ab)
    lat_ba, _ = model.encoder(comp_ba)
    return (model.motion("pose", lat_ab, banks), model.motion("mouth", lat_ab, banks),
            model.motion("pose", lat_ba, banks), model.motion("mouth", lat_ba, banks))


def cross_reconstruct(model, batch, features=None, banks=None):
    """Rebuild the originals after swapping the mouth features back: (rec_a, rec_b)."""
    banks = model.banks() if banks is None else banks
    if features is None:
        features = extract_swapped_features(model, batch["composite_ab"], batch["composite_ba"], banks)
    f_pb, f_ma, f_pa, f_mb = features
    lat_i, feats_i = model.encoder(batch["id_frame"])
    rec_a = model.render(lat_i, feats_i, f_pa + f_ma)
    rec_b = model.render(lat_i, feats_i, f_pb + f_mb)
    return rec_a, rec_b


def self_reconstruct(model, batch, banks=None):
    """Unswapped reconstructions plus the per-image reference features.

    Returns ``(self_a, self_b), (p_a, m_a, p_b, m_b)``.
    """
    banks = model.banks() if banks is None else banks
    lat_i, feats_i = model.encoder(batch["id_frame"])
    refs = []
    outs = []
    for key in ("img_a", "img_b"):
        lat, _ = model.encoder(batch[key])
        p, m = model.motion("pose", lat, banks), model.motion("mouth", lat, banks)
        refs += [p, m]
        outs.append(model.render(lat_i, feats_i, p + m))
    return tuple(outs), tuple(refs)


def _neg_exp_cos(x, y):
    return torch.exp(-F.cosine_similarity(x, y, dim=-1, eps=COS_EPS))


def fea_loss(features, refs):
    """Sum of exp(-cos) over the four swapped/reference feature pairs, averaged over the batch."""
    f_pb, f_ma, f_pa, f_mb = features
    p_a, m_a, p_b, m_b = refs
    terms = _neg_exp_cos(f_pb, p_b) + _neg_exp_cos(f_ma, m_a) + _neg_exp_cos(f_pa, p_a) + _neg_exp_cos(f_mb, m_b)
    return terms.mean()


def stage1_losses(batch, recs, self_recs, features, refs, discriminator, phi, weights=None):
    w = {"rec": 1.0, "per": 1.0, "adv": 1.0, "self": 1.0, "fea": 1.0} | dict(weights or {})
    rec, per = 0.0, 0.0
    self_rec = 0.0
    for key, out, out_self in zip(("img_a", "img_b"), recs, self_recs):
        r, p = image_terms(phi, batch[key], out)
        rs, ps = image_terms(phi, batch[key], out_self)
        rec, per, self_rec = rec + r, per + p, self_rec + rs + ps
    fake = torch.cat([*recs, *self_recs])
    real = torch.cat([batch["img_a"], batch["img_b"]] * 2)
    adv_g = g_loss(discriminator(fake))
    adv_d = d_loss(discriminator(real), discriminator(fake.detach()))
    fea = fea_loss(features, refs)
    total = w["rec"] * rec + w["per"] * per + w["adv"] * adv_g + w["self"] * self_rec + w["fea"] * fea
    return Stage1Losses(rec, per, adv_g, adv_d, self_rec, fea, total)


def stage1_forward(model, batch, phi, weights=None):
    banks = model.banks()
    features = extract_swapped_features(model, batch["composite_ab"], batch["composite_ba"], banks)
    recs = cross_reconstruct(model, batch, features, banks)
    self_recs, refs = self_reconstruct(model, batch, banks)
    return stage1_losses(batch, recs, self_recs, features, refs, model.discriminator, phi, weights), recs


def train_stage1(state, source, iters=None, log_path=None):
    """Train MLN/PLN (heads and mouth/pose bank rows) against the frozen autoencoder."""
    state.require("pretrain-ae")
    cfg, model, phi = state.cfg, state.model, state.oracles.perceptual
    tr = cfg["train"]
    iters = tr["iters"] if iters is None else iters
    B = tr["batch"]
    params = select_trainable(model, STAGE1_PARAMS, state.frozen)
    opt = adam(params, tr["lr"])
    d_params = list(model.discriminator.parameters())
    for p in d_params:
        p.requires_grad_(True)
    opt_d = adam(d_params, tr["lr"])
    history = LossLog(["rec", "per", "adv_g", "adv_d", "self", "fea", "total"], log_path, tr["log_every"])
    torch.manual_seed(tr["seed"])
    start = time.time()
    try:
        for it in range(iters):
            batch = pair_batch([source.stage1_pair(*sample_index(it, b, B, len(source))) for b in range(B)])
            losses, _ = stage1_forward(model, batch, phi, tr["loss_weights"])
            terms = losses.as_dict()
            check_finite(terms, it)
            step(opt, losses.total)
            step(opt_d, losses.adv_d)
            history.add(it, {k: v.item() for k, v in terms.items()})
    finally:
        history.close()
    state.stages.append({"stage": "train-stage1", "iters": iters, "seed": tr["seed"], "seconds": time.time() - start})
    state.freeze(STAGE1_PARAMS)
    return history


def window_mean(values, end, width=50):
    """Mean of ``values[end-width+1 : end+1]`` (clipped to the array)."""
    lo = max(0, end - width + 1)
    return float(np.mean(values[lo : end + 1])) if len(values) else math.nan
