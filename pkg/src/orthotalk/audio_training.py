"""Trainers for the audio-driven heads; every visual module stays frozen."""

import time

import numpy as np
import torch

from .audio2motion import expression_loss, lip_losses, pose_nll, pose_recon_losses, predict_expression
from .checkpoint import select_trainable
from .navigation import navigate
from .networks import to_tensor
from .oracles import audio_windows
from .training import LossLog, adam, check_finite, sample_index, step

LIP_PARAMS = ["audio.encoder", "audio.lip_head"]
POSE_PARAMS = ["audio.pose_flow"]
EXP_PARAMS = ["audio.expression_head"]

__all__ = [
    "EXP_PARAMS", "LIP_PARAMS", "POSE_PARAMS", "clip_motion", "expression_targets", "lip_forward",
    "pose_pool", "train_audio_exp", "train_audio_lip", "train_audio_pose",
]


def _seed(*keys):
    return np.random.default_rng(list(keys))


@torch.no_grad()
def clip_motion(model, frames, banks=None):
    """Per-frame mouth/pose/expression weights and latents for an N x H x W x 3 clip."""
    banks = model.banks() if banks is None else banks
    lat, _ = model.encoder(to_tensor(frames))
    nav = model.navigation
    return {"latent": lat, "mouth": nav.weights("mouth", lat), "pose": nav.weights("pose", lat),
            "expression": nav.weights("expression", lat)}


def lip_forward(model, sync, clips, id_frames, banks=None):
    """Lip losses for a list of clips: predicted mouth weights rendered with the true pose."""
    banks = model.banks() if banks is None else banks
    audio = torch.as_tensor(np.stack([c.audio for c in clips]), dtype=torch.float32)
    frames = to_tensor(np.concatenate([c.frames for c in clips]))
    B, N = audio.shape[:2]
    w_hat = model.audio.lip_head(model.audio.encoder(audio)).flatten(0, 1)
    with torch.no_grad():
        lat, _ = model.encoder(frames)
        w_gt = model.navigation.weights("mouth", lat)
        pose = model.motion("pose", lat, banks)
        lat_i, feats_i = model.encoder(to_tensor(np.stack(id_frames)))
        lat_i = lat_i.repeat_interleave(N, 0)
        feats_i = [f.repeat_interleave(N, 0) for f in feats_i]
    img_hat = model.render(lat_i, feats_i, pose + navigate(banks["mouth"], w_hat))
    v = sync.embed_audio(audio_windows(audio).flatten(0, 1))
    s = sync.embed_visual(img_hat)
    return lip_losses(w_gt, w_hat, frames, img_hat, v, s), img_hat


def train_audio_lip(state, source, iters=None, log_path=None):
    """Fit the audio encoder and lip head on expression-neutral clips."""
    state.require("train-stage1")
    cfg, model, sync = state.cfg, state.model, state.oracles.sync
    if not sync.fitted:
        raise ValueError("sync embedders are not fitted")
    tr = cfg["train"]
    iters = tr["iters"] if iters is None else iters
    w = tr["loss_weights"]
    B = tr["batch"]
    opt = adam(select_trainable(model, LIP_PARAMS, state.frozen), tr["lr"])
    history = LossLog(["fea", "rec", "sync", "total"], log_path, tr["log_every"])
    torch.manual_seed(tr["seed"])
    start = time.time()
    try:
        for it in range(iters):
            items = [sample_index(it, b, B, len(source)) for b in range(B)]
            clips = [source.clip(i, valence=0.0) for i, _ in items]
            ids = [source.identity_frame(i, d) for i, d in items]
            terms, _ = lip_forward(model, sync, clips, ids)
            terms["total"] = w["fea"] * terms["fea"] + w["rec"] * terms["rec"] + w["sync"] * terms["sync"]
            check_finite(terms, it)
            step(opt, terms["total"])
            history.add(it, {k: v.item() for k, v in terms.items()})
    finally:
        history.close()
    state.stages.append({"stage": "train-audio-lip", "iters": iters, "seed": tr["seed"], "seconds": time.time() - start})
    state.freeze(LIP_PARAMS)
    return history


@torch.no_grad()
def pose_pool(model, source, indices):
    """(pose weights C x N x n_p, audio conditions C x N x d_a) for the given clips."""
    ws, conds = [], []
    for i in indices:
        clip = source.clip(i)
        ws.append(clip_motion(model, clip.frames)["pose"])
        conds.append(model.audio.encoder(clip.audio))
    return torch.stack(ws), torch.stack(conds)


def train_audio_pose(state, source, iters=None, log_path=None, pool_clips=256, heldout=None):
    """Maximum-likelihood fit of the conditional pose flow on audio features from the frozen lip encoder.

    The stage record carries the held-out NLL right after the data-dependent
    initialization and at the end.
    """
    state.require("train-audio-lip")
    cfg, model = state.cfg, state.model
    tr = cfg["train"]
    iters = tr["iters"] if iters is None else iters
    w = tr["loss_weights"]
    B = tr["batch"]
    flow = model.audio.pose_flow
    params = select_trainable(model, POSE_PARAMS, state.frozen)
    pool_w, pool_c = pose_pool(model, source, range(min(pool_clips, len(source))))
    if heldout is None:
        heldout = (pool_w[:32], pool_c[:32])
    record = {"stage": "train-audio-pose", "iters": iters, "seed": tr["seed"]}
    if iters > 0:
        flow.initialize(pool_w.flatten(0, 1), pool_c.flatten(0, 1))
    with torch.no_grad():
        record["nll_init"] = float(pose_nll(flow, *heldout))
    opt = adam(params, tr["lr"])
    history = LossLog(["mle", "rec", "tem", "total"], log_path, tr["log_every"])
    gen = torch.Generator().manual_seed(tr["seed"])
    start = time.time()
    try:
        for it in range(iters):
            idx = torch.randint(0, len(pool_w), (B,), generator=gen)
            wp, cond = pool_w[idx], pool_c[idx]
            z, logdet = flow.inverse(wp, cond)
            mle = pose_nll(flow, wp, cond)
            terms = {"mle": mle, **pose_recon_losses(wp, flow(z, cond))}
            terms["total"] = w["mle"] * mle + w["rec"] * terms["rec"] + w["tem"] * terms["tem"]
            check_finite(terms, it)
            step(opt, terms["total"])
            history.add(it, {k: v.item() for k, v in terms.items()})
    finally:
        history.close()
    with torch.no_grad():
        record["nll_final"] = float(pose_nll(flow, *heldout))
    record["seconds"] = time.time() - start
    state.stages.append(record)
    state.freeze(POSE_PARAMS)
    return history


@torch.no_grad()
def expression_targets(model, oracles, source, indices, seed=0):
    """Per-clip (semantics embedding, text embedding, mean expression weights) for constant-valence clips."""
    audio_emb, text_emb, targets, valence = [], [], [], []
    for i in indices:
        v = float(_seed(seed, i, 7).uniform(-1.0, 1.0))
        clip = source.clip(i, valence=v)
        audio_emb.append(oracles.embed_semantics(clip.audio))
        text_emb.append(oracles.embed_text(clip.transcript))
        targets.append(clip_motion(model, clip.frames)["expression"].mean(0))
        valence.append(np.mean([a.expr_valence for a in clip.attrs]))
    return torch.stack(audio_emb), torch.stack(text_emb), torch.stack(targets), torch.tensor(valence)


def train_audio_exp(state, source, iters=None, log_path=None, pool_clips=512):
    """Fit the expression head with random modality masking (one draw per minibatch)."""
    state.require("train-stage2")
    cfg, model = state.cfg, state.model
    tr = cfg["train"]
    iters = tr["iters"] if iters is None else iters
    B = max(tr["batch"], 16)
    opt = adam(select_trainable(model, EXP_PARAMS, state.frozen), tr["lr"])
    a_emb, t_emb, target, _ = expression_targets(model, state.oracles, source,
                                                range(min(pool_clips, len(source))), tr["seed"])
    history = LossLog(["exp", "p"], log_path, tr["log_every"])
    rng = np.random.default_rng(tr["seed"])
    gen = torch.Generator().manual_seed(tr["seed"])
    start = time.time()
    try:
        for it in range(iters):
            idx = torch.randint(0, len(target), (B,), generator=gen)
            p = float(rng.uniform())
            w_hat = predict_expression(model.audio.expression_head, a_emb[idx], t_emb[idx], p_draw=p, training=True)
            loss = expression_loss(target[idx], w_hat)
            check_finite({"exp": loss}, it)
            step(opt, tr["loss_weights"]["exp"] * loss)
            history.add(it, {"exp": loss.item(), "p": p})
    finally:
        history.close()
    state.stages.append({"stage": "train-audio-exp", "iters": iters, "seed": tr["seed"], "seconds": time.time() - start})
    state.freeze(EXP_PARAMS)
    return history
