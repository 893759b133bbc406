"""Small, reproducible stand-ins for pretrained perception networks.

* ``PerceptualExtractor`` - random frozen conv stack (perceptual-loss features).
* ``AttributeProbe`` - regressor image -> (mouth, pose, expression) in unit ranges;
  its first two outputs serve as the motion probe, the last as the emotion probe.
* ``SyncEmbedder`` - audio-window and mouth-crop embedders trained contrastively.
* ``TextEmbedder`` / ``SemanticsEncoder`` - transcript and audio emotion embeddings.

Everything is frozen once built or fitted, and the whole suite serializes to a
bundle directory whose hash is recorded in model checkpoints.
"""

import json
import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .blobs import ChecksumError, read_blob, sha256_hex, write_blob
from .networks import to_tensor
from .synthdata import (
    VOCAB, WORD_VALENCE, FaceAttrs, mouth_box, random_identity, render_face, sample_stage2_clip,
)

log = logging.getLogger(__name__)

SYNC_WINDOW = 5


class OracleFitError(RuntimeError):
    pass


class UnfittedOracleError(RuntimeError):
    pass


def _seeded(seed, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def _freeze(module):
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


class PerceptualExtractor(nn.Module):
    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        convs, cin = [], 3
        for w in widths:
            convs.append(nn.Conv2d(cin, w, 3, padding=1))
            cin = w
        self.convs = nn.ModuleList(convs)

    def forward(self, images):
        feats, x = [], images
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            feats.append(x)
            if i + 1 < len(self.convs):
                x = F.avg_pool2d(x, 2)
        return feats


def build_toy_perceptual(seed):
    return _freeze(_seeded(seed, PerceptualExtractor))


def perceptual_distance(phi, x, y):
    """Sum over levels of the mean squared feature difference, per sample."""
    total = 0.0
    for fx, fy in zip(phi(x), phi(y)):
        total = total + ((fx - fy) ** 2).flatten(1).mean(1)
    return total


class AttributeProbe(nn.Module):
    def __init__(self, image_size):
        super().__init__()
        self.image_size = image_size
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2),
            nn.Flatten(),
            nn.Linear(64 * (image_size // 8) ** 2, 128), nn.LeakyReLU(0.2),
            nn.Linear(128, 3),
        )

    def forward(self, images):
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"probe expects {self.image_size}px images, got {tuple(images.shape[-2:])}")
        return self.body(images)

    def motion(self, images):
        return self(images)[:, :2]

    def emotion(self, images):
        return self(images)[:, 2:]


def random_attr_images(n, size, rng):
    images, targets = [], []
    for _ in range(n):
        attrs = FaceAttrs(float(rng.uniform(0, 1)), float(rng.uniform(-45, 45)), float(rng.uniform(-1, 1)),
                          random_identity(rng))
        images.append(render_face(attrs, size)[0])
        targets.append(attrs.normalized())
    return to_tensor(np.stack(images)), torch.as_tensor(np.stack(targets))


def r2_scores(pred, target):
    return 1.0 - ((pred - target) ** 2).mean(0) / target.var(0, unbiased=False)


def fit_attribute_probe(image_size, seed, iters=1500, n_train=4000, n_test=500, threshold=0.95):
    rng = np.random.default_rng(seed)
    x, y = random_attr_images(n_train, image_size, rng)
    xt, yt = random_attr_images(n_test, image_size, rng)
    probe = _seeded(seed, lambda: AttributeProbe(image_size))
    opt = torch.optim.Adam(probe.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(seed)
    for it in range(iters):
        idx = torch.randint(0, n_train, (64,), generator=gen)
        loss = F.mse_loss(probe(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = probe(xt)
    r2 = r2_scores(pred, yt)
    metrics = {"r2": [float(v) for v in r2], "mae": [float(v) for v in (pred - yt).abs().mean(0)]}
    log.info("attribute probe fitted: %s", metrics)
    if (r2 < threshold).any():
        raise OracleFitError(f"attribute probe R2 {metrics['r2']} below {threshold}; raise data or capacity")
    return _freeze(probe), metrics


def mouth_crop_box(image_size):
    box = mouth_box(image_size)
    rows = np.where(box.any(1))[0]
    cols = np.where(box.any(0))[0]
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def audio_windows(audio, width=SYNC_WINDOW):
    """N x F features -> N x width x F centered windows (edge-replicated)."""
    audio = torch.as_tensor(audio, dtype=torch.float32)
    half = width // 2
    idx = torch.arange(audio.shape[-2]).unsqueeze(1) + torch.arange(-half, half + 1)
    idx = idx.clamp(0, audio.shape[-2] - 1)
    return audio[..., idx, :]


class SyncEmbedder(nn.Module):
    def __init__(self, image_size, mel_bins=26, dim=64):
        super().__init__()
        self.crop = mouth_crop_box(image_size)
        self.dim = dim
        r0, r1, c0, c1 = self.crop
        self.audio_net = nn.Sequential(
            nn.Flatten(), nn.Linear(SYNC_WINDOW * mel_bins, 128), nn.LeakyReLU(0.2), nn.Linear(128, dim))
        self.visual_net = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2),
            nn.Conv2d(32, 32, 3, padding=1), nn.LeakyReLU(0.2), nn.Flatten(),
            nn.Linear(32 * ((r1 - r0) // 2) * ((c1 - c0) // 2), 128), nn.LeakyReLU(0.2), nn.Linear(128, dim))
        self.fitted = False

    def mouth_region(self, images):
        r0, r1, c0, c1 = self.crop
        return images[..., r0:r1, c0:c1]

    def embed_audio(self, windows):
        return self.audio_net(windows)

    def embed_visual(self, images):
        return self.visual_net(self.mouth_region(images))

    def forward(self, audio_window, images):
        if not self.fitted:
            raise UnfittedOracleError("sync embedders have not been trained")
        return self.embed_audio(audio_window), self.embed_visual(images)


def _sync_batch(rng, n, image_size):
    wins, imgs = [], []
    for _ in range(n):
        clip = sample_stage2_clip(int(rng.integers(2**31)), length=SYNC_WINDOW, size=image_size)
        wins.append(clip.audio)
        imgs.append(clip.frames[SYNC_WINDOW // 2])
    return torch.as_tensor(np.stack(wins)), to_tensor(np.stack(imgs))


def sync_margin(net, windows, images):
    with torch.no_grad():
        v = F.normalize(net.embed_audio(windows), dim=-1)
        s = F.normalize(net.embed_visual(images), dim=-1)
    sim = v @ s.T
    matched = sim.diag().mean()
    off = (sim.sum() - sim.diag().sum()) / (sim.numel() - len(sim))
    return float(matched), float(off)


def fit_sync_embedder(image_size, seed, mel_bins=26, dim=64, iters=800, threshold=0.3):
    rng = np.random.default_rng(seed)
    net = _seeded(seed, lambda: SyncEmbedder(image_size, mel_bins, dim))
    pool_w, pool_i = _sync_batch(rng, 2048, image_size)
    test_w, test_i = _sync_batch(rng, 200, image_size)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(seed)
    for it in range(iters):
        idx = torch.randint(0, len(pool_w), (64,), generator=gen)
        v = F.normalize(net.embed_audio(pool_w[idx]), dim=-1)
        s = F.normalize(net.embed_visual(pool_i[idx]), dim=-1)
        logits = v @ s.T / 0.1
        target = torch.arange(len(idx))
        loss = (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2
        opt.zero_grad()
        loss.backward()
        opt.step()
    matched, mismatched = sync_margin(net, test_w, test_i)
    metrics = {"matched_cos": matched, "mismatched_cos": mismatched, "margin": matched - mismatched}
    log.info("sync embedders fitted: %s", metrics)
    if matched - mismatched < threshold:
        raise OracleFitError(f"sync margin {matched - mismatched:.3f} below {threshold}")
    net.fitted = True
    return _freeze(net), metrics


class TextEmbedder(nn.Module):
    """Keyword-bag embedding: each word is a valence direction plus a small word-specific offset."""

    def __init__(self, dim=16):
        super().__init__()
        self.dim = dim
        direction = F.normalize(torch.randn(dim), dim=0)
        noise = F.normalize(torch.randn(len(VOCAB), dim), dim=1)
        valence = torch.tensor([WORD_VALENCE.get(w, 0.0) for w in VOCAB])
        self.word_vectors = nn.Parameter(valence[:, None] * direction[None] + 0.25 * noise, requires_grad=False)
        self.valence_direction = nn.Parameter(direction, requires_grad=False)

    def forward(self, tokens):
        tokens = list(getattr(tokens, "tokens", tokens))
        if not tokens:
            raise ValueError("empty transcript")
        counts = torch.bincount(torch.as_tensor(tokens, dtype=torch.long), minlength=len(VOCAB)).float()
        return F.normalize(counts @ self.word_vectors, dim=0)


class SemanticsEncoder(nn.Module):
    """Random frozen temporal conv features, mean-pooled over time."""

    def __init__(self, mel_bins=26, dim=16, hidden=32):
        super().__init__()
        self.conv = nn.Conv1d(mel_bins, hidden, 3, padding=1)
        self.proj = nn.Linear(hidden, dim)

    def forward(self, audio):
        audio = torch.as_tensor(audio, dtype=torch.float32)
        if audio.dim() != 2 or audio.shape[0] == 0:
            raise ValueError("semantics encoder needs a non-empty N x F feature matrix")
        h = F.relu(self.conv(audio.T.unsqueeze(0))).mean(-1).squeeze(0)
        return self.proj(h)


class OracleSuite:
    """All oracles plus the seeds and fit metrics that reproduce them."""

    MEMBERS = ("perceptual", "probe", "sync", "text", "semantics")

    def __init__(self, image_size, perceptual, probe, sync, text, semantics, seeds, metrics=None, mel_bins=26):
        self.image_size = image_size
        self.mel_bins = mel_bins
        self.perceptual = perceptual
        self.probe = probe
        self.sync = sync
        self.text = text
        self.semantics = semantics
        self.seeds = dict(seeds)
        self.metrics = dict(metrics or {})

    @classmethod
    def build(cls, oracle_cfg, model_cfg):
        seeds = oracle_cfg["seeds"]
        thresholds = oracle_cfg["fit_thresholds"]
        size = model_cfg["image_size"]
        probe, probe_metrics = fit_attribute_probe(size, seeds["probe"], iters=oracle_cfg["probe_iters"],
                                                   threshold=thresholds["probe_r2"])
        sync, sync_metrics = fit_sync_embedder(size, seeds["sync"], model_cfg["mel_bins"], model_cfg["sync_dim"],
                                               iters=oracle_cfg["sync_iters"], threshold=thresholds["sync_margin"])
        text = _freeze(_seeded(seeds["text"], lambda: TextEmbedder(model_cfg["text_dim"])))
        semantics = _freeze(_seeded(seeds["semantics"], lambda: SemanticsEncoder(model_cfg["mel_bins"], model_cfg["text_dim"])))
        return cls(size, build_toy_perceptual(seeds["perceptual"]), probe, sync, text, semantics, seeds,
                   {"probe": probe_metrics, "sync": sync_metrics}, mel_bins=model_cfg["mel_bins"])

    def modules(self):
        return {name: getattr(self, name) for name in self.MEMBERS}

    def motion(self, images):
        return self.probe.motion(images)

    def emotion(self, images):
        return self.probe.emotion(images)

    def sync_embed(self, audio_window, images):
        return self.sync(audio_window, images)

    def embed_text(self, tokens):
        return self.text(tokens)

    def embed_semantics(self, audio):
        return self.semantics(audio)

    def require_probe(self):
        r2 = self.metrics.get("probe", {}).get("r2")
        if r2 is None:
            raise UnfittedOracleError("attribute probe has no recorded fit")
        return r2

    # -- persistence

    def _index(self):
        index = {}
        for name, module in self.modules().items():
            for key, tensor in module.state_dict().items():
                index[f"{name}.{key}"] = tensor.detach().cpu().numpy()
        return index

    def save(self, root):
        root = Path(root)
        params = {}
        for key, array in self._index().items():
            rel = f"blobs/{key}.f32"
            params[key] = {"path": rel} | write_blob(root / rel, array)
        manifest = {
            "format_version": 1,
            "image_size": self.image_size,
            "mel_bins": self.mel_bins,
            "dims": {"text": self.text.dim, "sync": self.sync.dim},
            "seeds": self.seeds,
            "metrics": self.metrics,
            "params": params,
        }
        text = json.dumps(manifest, indent=1, sort_keys=True)
        (root / "manifest.json").write_text(text)
        return sha256_hex(text.encode())

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no oracle bundle at {root}")
        text = path.read_text()
        manifest = json.loads(text)
        size, mel = manifest["image_size"], manifest["mel_bins"]
        suite = cls(
            size,
            PerceptualExtractor(),
            AttributeProbe(size),
            SyncEmbedder(size, mel, manifest["dims"]["sync"]),
            TextEmbedder(manifest["dims"]["text"]),
            SemanticsEncoder(mel, manifest["dims"]["text"]),
            manifest["seeds"],
            manifest["metrics"],
            mel_bins=mel,
        )
        for name, module in suite.modules().items():
            state = {}
            for key in module.state_dict():
                info = manifest["params"][f"{name}.{key}"]
                state[key] = torch.from_numpy(read_blob(root / info["path"], info["shape"], info["sha256"]))
            module.load_state_dict(state)
            _freeze(module)
        suite.sync.fitted = "sync" in suite.metrics
        return suite, sha256_hex(text.encode())


def bundle_hash(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ChecksumError(f"missing oracle manifest in {root}")
    return sha256_hex(path.read_bytes())
