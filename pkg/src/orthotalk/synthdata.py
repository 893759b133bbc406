"""Procedural cartoon faces with analytic ground-truth attributes.

Every image is a pure function of its :class:`FaceAttrs`, and every sample is a
pure function of an integer seed, so whole datasets are reproducible from
``(seed, size)``.  The face is laid out so that each factor owns a region:

* mouth_open only moves the lips/mouth cavity, which never leave the mouth box;
* pose_yaw shears the head outline and shifts eyes, brows and nose (the shear is
  anchored on the mouth row and the mouth itself is drawn unsheared);
* expr_valence slants the brows and bends the mouth corners.
"""

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blobs import ChecksumError, read_blob, write_blob

MOUTH_ROW = 0.45
MOUTH_HALF_WIDTH = 0.2
LIP = 0.03
MAX_CURVE = 0.14
YAW_LIMIT = 45.0
MEL_BINS = 26

POSITIVE_WORDS = ("happy", "joy", "great", "love", "smile")
NEGATIVE_WORDS = ("sad", "cry", "sorry", "lost", "tears")
FILLER_WORDS = ("the", "a", "we", "talk", "about", "it", "today", "and", "then", "so")
VOCAB = FILLER_WORDS + POSITIVE_WORDS + NEGATIVE_WORDS
WORD_VALENCE = {w: 1.0 for w in POSITIVE_WORDS} | {w: -1.0 for w in NEGATIVE_WORDS}


class AttributeRangeError(ValueError):
    pass


@dataclass(frozen=True)
class Identity:
    aspect: float
    hue: float
    eye_spacing: float
    tone: float

    def as_array(self):
        return np.array([self.aspect, self.hue, self.eye_spacing, self.tone], dtype=np.float32)


@dataclass(frozen=True)
class FaceAttrs:
    mouth_open: float
    pose_yaw: float
    expr_valence: float
    identity: Identity

    def validate(self):
        checks = {
            "mouth_open": (self.mouth_open, 0.0, 1.0),
            "pose_yaw": (self.pose_yaw, -YAW_LIMIT, YAW_LIMIT),
            "expr_valence": (self.expr_valence, -1.0, 1.0),
        }
        for name in ("aspect", "hue", "eye_spacing", "tone"):
            checks[f"identity.{name}"] = (getattr(self.identity, name), 0.0, 1.0)
        for name, (value, lo, hi) in checks.items():
            if not np.isfinite(value) or value < lo or value > hi:
                raise AttributeRangeError(f"{name}={value} outside [{lo}, {hi}]")

    def normalized(self):
        """(mouth, pose, expression) mapped to unit ranges."""
        return np.array(
            [self.mouth_open, (self.pose_yaw + YAW_LIMIT) / (2 * YAW_LIMIT), (self.expr_valence + 1) / 2],
            dtype=np.float32,
        )

    def as_array(self):
        head = np.array([self.mouth_open, self.pose_yaw, self.expr_valence], dtype=np.float32)
        return np.concatenate([head, self.identity.as_array()])

    @classmethod
    def from_array(cls, row):
        row = [float(v) for v in row]
        return cls(row[0], row[1], row[2], Identity(*row[3:7]))


@dataclass
class TranscriptTokens:
    tokens: list

    @property
    def words(self):
        return [VOCAB[t] for t in self.tokens]

    @property
    def keywords(self):
        return [w for w in self.words if w in WORD_VALENCE]

    @classmethod
    def from_words(cls, words):
        return cls([VOCAB.index(w) for w in words])


@dataclass
class SwapPair:
    img_a: np.ndarray
    img_b: np.ndarray
    mouth_mask: np.ndarray
    composite_ab: np.ndarray  # mouth of a on the rest of b
    composite_ba: np.ndarray  # mouth of b on the rest of a
    id_frame: np.ndarray
    attrs_a: FaceAttrs
    attrs_b: FaceAttrs
    attrs_id: FaceAttrs


@dataclass
class ClipSample:
    frames: np.ndarray  # N x H x W x 3
    attrs: list
    audio: np.ndarray  # N x MEL_BINS
    transcript: TranscriptTokens
    mouth_masks: np.ndarray  # N x H x W
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def attr_matrix(self):
        return np.stack([a.as_array() for a in self.attrs])

    def normalized_attrs(self):
        return np.stack([a.normalized() for a in self.attrs])


# ---------------------------------------------------------------- rendering


def _grid(size):
    c = (np.arange(size, dtype=np.float64) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c)  # x varies along columns, y along rows (downwards)


def _ellipse_cov(x, y, cx, cy, rx, ry, px, angle=0.0):
    """Anti-aliased coverage of an ellipse, from a first-order distance estimate."""
    dx, dy = x - cx, y - cy
    if angle:
        ca, sa = np.cos(angle), np.sin(angle)
        dx, dy = ca * dx + sa * dy, -sa * dx + ca * dy
    r = np.sqrt((dx / rx) ** 2 + (dy / ry) ** 2)
    grad = np.sqrt((dx / rx**2) ** 2 + (dy / ry**2) ** 2) / np.maximum(r, 1e-9)
    sd = (r - 1.0) / np.maximum(grad, 1e-9)
    return np.clip(0.5 - sd / px, 0.0, 1.0)


def _paint(img, cov, color):
    cov = cov[..., None]
    img *= 1.0 - cov
    img += cov * np.asarray(color)


def mouth_box(size):
    """Boolean H x W mask: the mouth's maximal extent, dilated by two pixels."""
    x, y = _grid(size)
    px = 2.0 / size
    half_h = 0.025 + 0.10 + LIP + MAX_CURVE
    half_w = MOUTH_HALF_WIDTH + LIP
    pad = 2 * px
    return (np.abs(x) <= half_w + pad) & (np.abs(y - MOUTH_ROW) <= half_h + pad)


def render_face(attrs: FaceAttrs, size=64):
    """Rasterize ``attrs`` into an ``size x size x 3`` image in [-1, 1] plus its mouth mask."""
    attrs.validate()
    x, y = _grid(size)
    px = 2.0 / size
    ident = attrs.identity
    yaw = attrs.pose_yaw / YAW_LIMIT
    val = attrs.expr_valence

    skin = np.array(colorsys.hsv_to_rgb(ident.hue, 0.45, 0.55 + 0.35 * ident.tone))
    lip = np.array(colorsys.hsv_to_rgb((0.98 + 0.05 * ident.hue) % 1.0, 0.6, 0.55))
    img = np.empty((size, size, 3))
    img[:] = 0.18

    # head outline: shear anchored on the mouth row
    xs = x - 0.12 * yaw * (MOUTH_ROW - y)
    rx_head = 0.58 + 0.14 * ident.aspect
    _paint(img, _ellipse_cov(xs, y, 0.0, 0.02, rx_head, 0.86, px), skin)

    def feat_x(row):
        return 0.28 * yaw * (MOUTH_ROW - row)

    eye_dx = 0.2 + 0.1 * ident.eye_spacing
    for side in (-1.0, 1.0):
        scale = 1.0 - 0.25 * yaw * side
        ey = -0.18
        by = -0.36 - 0.06 * val
        _paint(
            img,
            _ellipse_cov(x, y, side * eye_dx + feat_x(by), by, 0.12 * scale, 0.03, px, angle=side * 0.45 * val),
            skin * 0.35,
        )
        _paint(img, _ellipse_cov(x, y, side * eye_dx + feat_x(ey), ey, 0.085 * scale, 0.05, px), (0.95, 0.95, 0.95))
        _paint(img, _ellipse_cov(x, y, side * eye_dx + feat_x(ey) + 0.02 * yaw, ey, 0.04 * scale, 0.04, px), (0.05, 0.05, 0.1))

    ny = -0.02
    _paint(img, _ellipse_cov(x, y, feat_x(ny), ny, 0.05, 0.07, px), skin * 0.7)

    # mouth: unsheared, corners bent by valence
    hm = 0.025 + 0.10 * attrs.mouth_open
    yc = y - MOUTH_ROW + MAX_CURVE * val * (x / MOUTH_HALF_WIDTH) ** 2
    _paint(img, _ellipse_cov(x, yc, 0.0, 0.0, MOUTH_HALF_WIDTH + LIP, hm + LIP, px), lip)
    _paint(img, _ellipse_cov(x, yc, 0.0, 0.0, MOUTH_HALF_WIDTH, hm, px), (0.12, 0.02, 0.03))

    frame = (img * 2.0 - 1.0).clip(-1.0, 1.0).astype(np.float32)
    return frame, mouth_box(size).astype(np.float32)


def composite_mouth_swap(img_a, img_b, mouth_mask):
    """Return ``(composite_ab, composite_ba)``; ``composite_ab`` carries a's mouth on b."""
    img_a, img_b = np.asarray(img_a), np.asarray(img_b)
    if img_a.shape != img_b.shape or img_a.shape[:2] != np.shape(mouth_mask):
        raise ValueError(f"shape mismatch: {img_a.shape}, {img_b.shape}, mask {np.shape(mouth_mask)}")
    m = np.asarray(mouth_mask, dtype=img_a.dtype)
    if m.min() < 0 or m.max() > 1:
        raise ValueError("mouth mask must lie in [0, 1]")
    m = m[..., None]
    composite_ab = m * img_a + (1 - m) * img_b
    composite_ba = m * img_b + (1 - m) * img_a
    return composite_ab, composite_ba


# ----------------------------------------------------------------- sampling


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def random_identity(rng):
    return Identity(*rng.uniform(0.0, 1.0, size=4).tolist())


def sample_stage1_pair(seed, size=64, identity=None):
    """Two neutral frames of one identity with independent mouth/pose, plus a third id frame."""
    rng = _rng(seed)
    ident = identity if identity is not None else random_identity(rng)
    draws = [
        FaceAttrs(float(rng.uniform(0, 1)), float(rng.uniform(-YAW_LIMIT, YAW_LIMIT)), 0.0, ident)
        for _ in range(3)
    ]
    (img_a, mask_a), (img_b, mask_b), (img_id, _) = (render_face(a, size) for a in draws)
    mask = np.maximum(mask_a, mask_b)
    comp_ab, comp_ba = composite_mouth_swap(img_a, img_b, mask)
    return SwapPair(img_a, img_b, mask, comp_ab, comp_ba, img_id, *draws)


def _walk(rng, n, lo, hi, step, start=None):
    out = np.empty(n)
    v = rng.uniform(lo, hi) if start is None else start
    for t in range(n):
        out[t] = v
        v = v + rng.uniform(-step, step)
        if v < lo:
            v = 2 * lo - v
        if v > hi:
            v = 2 * hi - v
    return out


def _syllables(rng, n):
    """Speech-like mouth track: open/close cycles of 4-7 frames with a slowly drifting peak."""
    phase = rng.uniform(0, 2 * np.pi) + np.cumsum(rng.uniform(2 * np.pi / 7, 2 * np.pi / 4, n))
    peak = _walk(rng, n, 0.5, 1.0, 0.1)
    return peak * (0.5 - 0.5 * np.cos(phase))


def valence_segments(rng, n, min_len):
    values = np.empty(n)
    t = 0
    while t < n:
        seg = int(rng.integers(min_len, 2 * min_len + 1))
        values[t : t + seg] = rng.uniform(-1.0, 1.0)
        t += seg
    return values


def sample_stage2_clip(seed, length=24, K=5, size=64, identity=None, valence=None):
    """A talking clip: syllabic mouth, smooth pose walk, valence constant over segments of >= 2K frames.

    ``valence`` pins one value for the whole clip.
    """
    rng = _rng(seed)
    ident = identity if identity is not None else random_identity(rng)
    mouth = _syllables(rng, length)
    yaw = _walk(rng, length, -YAW_LIMIT, YAW_LIMIT, 5.0)
    if valence is None:
        vals = valence_segments(rng, length, 2 * K)
    else:
        vals = np.full(length, float(valence))
    attrs = [FaceAttrs(float(m), float(p), float(v), ident) for m, p, v in zip(mouth, yaw, vals)]
    rendered = [render_face(a, size) for a in attrs]
    frames = np.stack([r[0] for r in rendered])
    masks = np.stack([r[1] for r in rendered])
    audio, transcript = synth_audio_features(mouth, vals, int(rng.integers(2**31)))
    return ClipSample(frames, attrs, audio, transcript, masks, seed=int(seed))


def neutral_frame(identity, rng, size=64):
    attrs = FaceAttrs(float(rng.uniform(0, 1)), float(rng.uniform(-YAW_LIMIT, YAW_LIMIT)), 0.0, identity)
    return render_face(attrs, size)[0], attrs


# -------------------------------------------------------------------- audio


def synth_audio_features(mouth_open, expr_valence, seed, n_bins=MEL_BINS):
    """Stand-in mel features: bands 0-7 track mouth opening, a spectral tilt tracks valence."""
    mouth_open = np.asarray(mouth_open, dtype=np.float64)
    n = len(mouth_open)
    if n == 0:
        raise ValueError("empty mouth trajectory")
    vals = np.broadcast_to(np.asarray(expr_valence, dtype=np.float64), (n,))
    rng = _rng(seed)
    feats = np.empty((n, n_bins))
    feats[:, :8] = mouth_open[:, None] + rng.normal(0.0, 0.05, size=(n, 8))
    tilt = np.linspace(-1.0, 1.0, n_bins - 8)
    feats[:, 8:] = 0.5 * vals[:, None] * tilt[None, :] + 0.3 * mouth_open[:, None] + rng.normal(0.0, 0.1, size=(n, n_bins - 8))

    mean_val = float(vals.mean())
    words = list(rng.choice(FILLER_WORDS, size=int(rng.integers(5, 9))))
    if mean_val > 0:
        keys = POSITIVE_WORDS
    elif mean_val < 0:
        keys = NEGATIVE_WORDS
    else:
        keys = ()
    if keys:
        for _ in range(1 + int(abs(mean_val) * 2)):
            words.insert(int(rng.integers(len(words) + 1)), str(rng.choice(keys)))
    return feats.astype(np.float32), TranscriptTokens.from_words(words)


# ------------------------------------------------------------------ sources


class SynthSource:
    """Lazily generated dataset: clip ``i`` is a pure function of ``(seed, i)``."""

    def __init__(self, seed, size, image_size=64, clip_length=24, window_K=5):
        self.seed = int(seed)
        self.size = int(size)
        self.image_size = image_size
        self.clip_length = clip_length
        self.window_K = window_K

    def __len__(self):
        return self.size

    def identity(self, i):
        return random_identity(_rng(self.seed, i, 0))

    def stage1_pair(self, i, draw=0):
        return sample_stage1_pair(int(np.random.SeedSequence([self.seed, i, 1, draw]).generate_state(1)[0]),
                                  self.image_size, identity=self.identity(i))

    def clip(self, i, valence=None):
        seed = int(np.random.SeedSequence([self.seed, i, 2]).generate_state(1)[0])
        return sample_stage2_clip(seed, self.clip_length, self.window_K, self.image_size,
                                  identity=self.identity(i), valence=valence)

    def stage0_pair(self, i, draw=0):
        """(source, driving) frames of one identity with independent motion, expression included."""
        rng = _rng(self.seed, i, 3, draw)
        ident = self.identity(i)
        frames = []
        for _ in range(2):
            val = float(rng.uniform(-1, 1)) if rng.uniform() < 0.7 else 0.0
            attrs = FaceAttrs(float(rng.uniform(0, 1)), float(rng.uniform(-YAW_LIMIT, YAW_LIMIT)), val, ident)
            frames.append(render_face(attrs, self.image_size)[0])
        return frames[0], frames[1]

    def identity_frame(self, i, draw=0):
        """A neutral-expression frame of clip ``i``'s identity."""
        return neutral_frame(self.identity(i), _rng(self.seed, i, 4, draw), self.image_size)[0]

    def frame(self, attrs):
        return render_face(attrs, self.image_size)[0]


class ManifestSource:
    """Training-source view over an on-disk dataset (same sampling interface as SynthSource)."""

    def __init__(self, dataset, window_K=5):
        self.dataset = dataset
        self.window_K = window_K
        self._cache = {}
        first = dataset.clip(0)
        self.image_size = first.frames.shape[1]
        self.clip_length = len(first)

    def __len__(self):
        return len(self.dataset)

    def clip(self, i, valence=None):
        if i not in self._cache:
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[i] = self.dataset.clip(i)
        return self._cache[i]

    def _frames(self, i, draw, n, salt):
        clip = self.clip(i)
        idx = _rng(i, salt, draw).choice(len(clip), size=n, replace=len(clip) < n)
        return clip, idx

    def stage0_pair(self, i, draw=0):
        clip, idx = self._frames(i, draw, 2, 3)
        return clip.frames[idx[0]], clip.frames[idx[1]]

    def stage1_pair(self, i, draw=0):
        clip, idx = self._frames(i, draw, 3, 1)
        a, b, c = idx
        mask = np.maximum(clip.mouth_masks[a], clip.mouth_masks[b])
        comp_ab, comp_ba = composite_mouth_swap(clip.frames[a], clip.frames[b], mask)
        return SwapPair(clip.frames[a], clip.frames[b], mask, comp_ab, comp_ba, clip.frames[c],
                        clip.attrs[a], clip.attrs[b], clip.attrs[c])

    def identity_frame(self, i, draw=0):
        clip = self.clip(i)
        order = np.argsort([abs(a.expr_valence) for a in clip.attrs], kind="stable")
        return clip.frames[order[draw % max(1, len(order) // 4)]]


# ---------------------------------------------------------------- manifests


class ManifestError(ValueError):
    pass


def _clip_blobs(clip):
    return {
        "frames": clip.frames,
        "masks": clip.mouth_masks,
        "attrs": clip.attr_matrix(),
        "audio": clip.audio,
    }


def write_manifest(root, clips):
    """Write clips under ``root`` as ``manifest.jsonl`` plus ``blobs/``; returns the record list."""
    root = Path(root)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    records = []
    for idx, clip in enumerate(clips):
        rec = {"clip": idx, "n_frames": len(clip), "seed": int(clip.seed), "tokens": list(map(int, clip.transcript.tokens))}
        for name, arr in _clip_blobs(clip).items():
            rel = f"blobs/clip{idx:06d}_{name}.f32"
            rec[name] = {"path": rel} | write_blob(root / rel, arr)
        attrs = clip.attr_matrix()
        rec["attr_summary"] = {
            key: [float(attrs[:, j].min()), float(attrs[:, j].max()), float(attrs[:, j].mean())]
            for j, key in enumerate(("mouth_open", "pose_yaw", "expr_valence"))
        }
        records.append(rec)
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


class ManifestDataset:
    """Read-side handle over a dataset directory; blobs are loaded and verified on access."""

    def __init__(self, root, records):
        self.root = Path(root)
        self.records = records

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.clip(i)

    def clip(self, i):
        rec = self.records[i]
        arrays = {}
        for name in ("frames", "masks", "attrs", "audio"):
            info = rec[name]
            arrays[name] = read_blob(self.root / info["path"], info["shape"], info["sha256"])
        attrs = [FaceAttrs.from_array(row) for row in arrays["attrs"]]
        return ClipSample(arrays["frames"], attrs, arrays["audio"], TranscriptTokens(list(rec["tokens"])),
                          arrays["masks"], seed=rec["seed"])

    def verify(self):
        for i in range(len(self)):
            self.clip(i)


_REQUIRED = ("clip", "n_frames", "seed", "tokens", "frames", "masks", "attrs", "audio")


def read_manifest(root, verify=True):
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.exists():
        return ManifestDataset(root, [])
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing fields {missing}")
        records.append(rec)
    ds = ManifestDataset(root, records)
    if verify:
        ds.verify()
    return ds


__all__ = [
    "AttributeRangeError", "ChecksumError", "ClipSample", "FaceAttrs", "Identity", "ManifestDataset", "ManifestSource",
    "ManifestError", "SwapPair", "SynthSource", "TranscriptTokens", "composite_mouth_swap", "mouth_box",
    "make_dataset", "read_manifest", "render_face", "sample_stage1_pair", "sample_stage2_clip", "synth_audio_features",
    "write_manifest",
]


def make_dataset(root, seed, size, clip_length=24, image_size=64, window_K=5):
    source = SynthSource(seed, size, image_size, clip_length, window_K)
    return write_manifest(root, (source.clip(i) for i in range(size)))
