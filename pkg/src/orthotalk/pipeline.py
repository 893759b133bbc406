"""Inference (video- and audio-driven), expression manipulation, evaluation and clip I/O."""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .audio2motion import predict_expression, sample_pose
from .navigation import BANK_ORDER, interpolate_expression, navigate
from .networks import to_frames, to_tensor
from .synthdata import FaceAttrs, neutral_frame, random_identity, render_face

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
PROBE_COLUMN = {"mouth": 0, "pose": 1, "expression": 2}

__all__ = [
    "eval_disentangle", "expression_track", "infer_audio", "infer_video", "manipulate", "psnr", "read_clip",
    "write_clip",
]


def _clip(x):
    x = np.asarray(x, dtype=np.float32)
    return x[None] if x.ndim == 3 else x


def _lengths(sources, length=None):
    present = {k: len(v) for k, v in sources.items() if v is not None}
    if not present:
        return 1 if length is None else length
    n = min(present.values())
    if len(set(present.values())) > 1:
        log.warning("driving clips differ in length %s; using the shortest (%d frames)", present, n)
    return n if length is None else min(n, length)


def _encode(model, frames, chunk=64):
    lats = [model.encoder(to_tensor(frames[s : s + chunk]))[0] for s in range(0, len(frames), chunk)]
    return torch.cat(lats)


def expression_track(model, frames, K=5):
    """Per-frame expression weights averaged over a centered K-window (edge-clamped)."""
    frames = _clip(frames)
    weights = model.navigation.weights("expression", _encode(model, frames))
    half = K // 2
    idx = (torch.arange(len(frames))[:, None] + torch.arange(-half, half + 1)).clamp(0, len(frames) - 1)
    return weights[idx].mean(1)


def _drive(model, identity, n, weights, use_eem, chunk=32):
    """Render ``n`` frames of ``identity`` from per-frame weight tracks (absent tracks contribute zero)."""
    banks = model.banks()
    lat_i, feats_i = model.encoder(to_tensor(_clip(identity)[:1]))
    d = lat_i.shape[-1]
    motion = torch.zeros(n, d)
    for label in ("mouth", "pose"):
        if weights.get(label) is not None:
            motion = motion + navigate(banks[label], weights[label][:n])
    f_exp = None
    if use_eem:
        w_e = weights.get("expression")
        f_exp = torch.zeros(n, d) if w_e is None else navigate(banks["expression"], w_e[:n])
    out = []
    for s in range(0, n, chunk):
        m = motion[s : s + chunk]
        feats = [f.expand(len(m), *f.shape[1:]) for f in feats_i]
        lat = lat_i.expand(len(m), -1)
        out.append(model.render(lat, feats, m, None if f_exp is None else f_exp[s : s + chunk]))
    return to_frames(torch.cat(out))


@torch.no_grad()
def infer_video(model, identity, mouth_src=None, pose_src=None, exp_src=None, K=5, length=None):
    """Animate ``identity`` with mouth, pose and expression taken from (optional) driving clips."""
    sources = {"mouth": mouth_src, "pose": pose_src, "expression": exp_src}
    sources = {k: None if v is None else _clip(v) for k, v in sources.items()}
    n = _lengths(sources, length)
    weights = {}
    for label in ("mouth", "pose"):
        if sources[label] is not None:
            weights[label] = model.navigation.weights(label, _encode(model, sources[label]))
    if sources["expression"] is not None:
        weights["expression"] = expression_track(model, sources["expression"], K)
    return _drive(model, identity, n, weights, use_eem=exp_src is not None)


@torch.no_grad()
def manipulate(model, identity, exp_clip_1, exp_clip_2, alpha, mouth_src=None, pose_src=None, K=5):
    """Drive with ``alpha * W(exp_clip_1) + (1 - alpha) * W(exp_clip_2)`` expression weights."""
    sources = {"mouth": mouth_src, "pose": pose_src, "exp1": exp_clip_1, "exp2": exp_clip_2}
    sources = {k: None if v is None else _clip(v) for k, v in sources.items()}
    n = _lengths(sources)
    w1 = expression_track(model, sources["exp1"], K)[:n]
    w2 = expression_track(model, sources["exp2"], K)[:n]
    weights = {"expression": interpolate_expression(w1, w2, alpha)}
    for label in ("mouth", "pose"):
        if sources[label] is not None:
            weights[label] = model.navigation.weights(label, _encode(model, sources[label]))
    return _drive(model, identity, n, weights, use_eem=True)


@torch.no_grad()
def audio_weights(model, oracles, audio, transcript=None, pose_seed=0):
    audio = torch.as_tensor(np.asarray(audio), dtype=torch.float32)
    f_a = model.audio.encoder(audio)
    text = None
    if transcript is not None and len(getattr(transcript, "tokens", transcript)):
        text = oracles.embed_text(transcript)
    w_e = predict_expression(model.audio.expression_head, oracles.embed_semantics(audio), text)
    return {
        "mouth": model.audio.lip_head(f_a),
        "pose": sample_pose(model.audio.pose_flow, f_a, pose_seed),
        "expression": w_e.expand(len(audio), -1),
    }


@torch.no_grad()
def infer_audio(model, oracles, identity, audio, transcript=None, pose_seed=0):
    """Talking clip from one identity frame and an N x F audio feature sequence."""
    weights = audio_weights(model, oracles, audio, transcript, pose_seed)
    return _drive(model, identity, len(weights["mouth"]), weights, use_eem=True)


def psnr(x, y):
    """PSNR in dB between images scaled to [0, 1], capped for identical inputs."""
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def disentangle_pairs(seed, count, size, with_expression=True):
    """``count`` (identity frame, attrs A, attrs B) triples sharing one identity each."""
    rng = np.random.default_rng([seed, 17])
    out = []
    for _ in range(count):
        ident = random_identity(rng)
        attrs = []
        for _ in range(2):
            val = float(rng.uniform(-1, 1)) if with_expression else 0.0
            attrs.append(FaceAttrs(float(rng.uniform(0, 1)), float(rng.uniform(-45, 45)), val, ident))
        out.append((neutral_frame(ident, rng, size)[0], attrs[0], attrs[1]))
    return out


@torch.no_grad()
def eval_disentangle(model, probe, seed=0, count=64, components=None):
    """Single-space edit leakage matrix and self-reconstruction PSNR.

    For every pair the identity frame is driven by A's features; an X-edit swaps in
    B's feature for space X only.  ``leakage[X][Y]`` is the mean absolute change of
    attribute Y under X-edits divided by that under Y-edits.
    """
    if probe is None or not getattr(probe, "fitted", True):
        raise ValueError("an attribute probe is required")
    components = list(components or BANK_ORDER)
    use_eem = "expression" in components
    size = model.image_size
    pairs = disentangle_pairs(seed, count, size, with_expression=use_eem)
    ident = to_tensor(np.stack([p[0] for p in pairs]))
    imgs_a = np.stack([render_face(p[1], size)[0] for p in pairs])
    imgs_b = np.stack([render_face(p[2], size)[0] for p in pairs])
    banks = model.banks()
    lat_a, lat_b = _encode(model, imgs_a), _encode(model, imgs_b)
    feat_a = {c: model.motion(c, lat_a, banks) for c in components}
    feat_b = {c: model.motion(c, lat_b, banks) for c in components}
    lat_i, feats_i = model.encoder(ident)

    def render(feats):
        motion = sum((feats[c] for c in components if c != "expression"), torch.zeros_like(lat_i))
        return model.render(lat_i, feats_i, motion, feats["expression"] if use_eem else None)

    base = probe(render(feat_a))
    deltas = {}
    for x in components:
        edited = probe(render(feat_a | {x: feat_b[x]}))
        deltas[x] = {y: float((edited[:, PROBE_COLUMN[y]] - base[:, PROBE_COLUMN[y]]).abs().mean()) for y in components}
    leakage = {x: {y: deltas[x][y] / max(deltas[y][y], 1e-12) for y in components} for x in components}
    lat_s, feats_s = model.encoder(to_tensor(imgs_a))
    motion = sum((feat_a[c] for c in components if c != "expression"), torch.zeros_like(lat_s))
    recon = to_frames(model.render(lat_s, feats_s, motion, feat_a["expression"] if use_eem else None))
    scores = [psnr((r + 1) / 2, (a + 1) / 2) for r, a in zip(recon, imgs_a)]
    return {"components": components, "pairs": count, "seed": seed, "leakage": leakage, "deltas": deltas,
            "psnr_self": float(np.mean(scores)), "l1_self": float(np.abs(recon - imgs_a).mean())}


# ----------------------------------------------------------------- clip I/O


def _to_uint8(frames):
    return np.round((np.clip(_clip(frames), -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def write_clip(frames, root, meta=None):
    """Numbered 8-bit RGB PNGs plus ``index.json``; returns the index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    data = _to_uint8(frames)
    names = []
    for t, frame in enumerate(data):
        name = f"frame_{t:05d}.png"
        Image.fromarray(frame, "RGB").save(root / name)
        names.append(name)
    index = {"frames": names, "count": len(names), "size": list(data.shape[1:3]),
             "sha256": hashlib.sha256(data.tobytes()).hexdigest(), "meta": meta or {}}
    (root / "index.json").write_text(json.dumps(index, indent=1))
    return index


def read_clip(root):
    """Frames of a clip directory (or a single PNG) as float32 in [-1, 1]."""
    root = Path(root)
    if root.is_file():
        paths = [root]
    else:
        index_path = root / "index.json"
        if not index_path.exists():
            raise FileNotFoundError(f"no clip index in {root}")
        paths = [root / n for n in json.loads(index_path.read_text())["frames"]]
    frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])
    return (frames.astype(np.float32) / 127.5 - 1.0).astype(np.float32)
