import numpy as np
import pytest
import torch

from orthotalk.oracles import (OracleFitError, OracleSuite, UnfittedOracleError, audio_windows, build_toy_perceptual,
                               bundle_hash, fit_attribute_probe, perceptual_distance, random_attr_images,
                               SyncEmbedder, _sync_batch)
from orthotalk.synthdata import TranscriptTokens


def test_perceptual_is_seeded_and_sensitive():
    a, b = build_toy_perceptual(3), build_toy_perceptual(3)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    assert not all(p.requires_grad for p in a.parameters())
    img = torch.rand(2, 3, 16, 16) * 2 - 1
    assert all(torch.equal(x, y) for x, y in zip(a(img), a(img)))
    assert [f.shape[-1] for f in a(img)] == [16, 8, 4]
    assert (perceptual_distance(a, img, img) == 0).all()
    bumped = img.clone()
    bumped[:, :, 4:8, 4:8] += 0.2
    assert (perceptual_distance(a, img, bumped) > 0).all()


def test_probe_fit_failure_raises():
    with pytest.raises(OracleFitError):
        fit_attribute_probe(8, 0, iters=2, n_train=32, n_test=16, threshold=0.99)


def test_fitted_probe_accuracy(fitted_oracles):
    assert min(fitted_oracles.require_probe()) >= 0.95
    x, y = random_attr_images(300, 32, np.random.default_rng(2024))
    with torch.no_grad():
        pred = fitted_oracles.probe(x)
    mae = (pred - y).abs().mean(0)
    assert (mae <= 0.05).all(), mae
    assert torch.equal(fitted_oracles.probe(x[:4]), fitted_oracles.probe(x[:4]))
    with pytest.raises(ValueError):
        fitted_oracles.probe(torch.zeros(1, 3, 16, 16))


def test_sync_matched_beats_shuffled(fitted_oracles):
    windows, images = _sync_batch(np.random.default_rng(77), 200, 32)
    v, s = fitted_oracles.sync_embed(windows, images)
    assert v.shape == s.shape == (200, 64)
    cos = torch.nn.functional.cosine_similarity
    matched = cos(v, s).mean()
    shuffled = cos(v, s.roll(1, 0)).mean()
    assert matched > shuffled
    assert fitted_oracles.metrics["sync"]["margin"] >= 0.3


def test_unfitted_sync_raises():
    with pytest.raises(UnfittedOracleError):
        SyncEmbedder(32, 26, 8)(torch.zeros(1, 5, 26), torch.zeros(1, 3, 32, 32))


def test_audio_windows_replicate_edges():
    audio = torch.arange(4.0)[:, None].repeat(1, 2)
    win = audio_windows(audio, 5)
    assert win.shape == (4, 5, 2)
    assert win[0, :, 0].tolist() == [0, 0, 0, 1, 2]
    assert win[3, :, 0].tolist() == [1, 2, 3, 3, 3]


def test_text_embedding_valence(tiny_oracles):
    happy = tiny_oracles.embed_text(TranscriptTokens.from_words(["happy"]))
    sad = tiny_oracles.embed_text(TranscriptTokens.from_words(["sad"]))
    assert torch.dot(happy, sad) < 0
    assert torch.equal(happy, tiny_oracles.embed_text(TranscriptTokens.from_words(["happy"])))
    with pytest.raises(ValueError):
        tiny_oracles.embed_text(TranscriptTokens([]))


def test_semantics_embedding(tiny_oracles):
    audio = np.random.default_rng(0).standard_normal((10, 26)).astype(np.float32)
    e = tiny_oracles.embed_semantics(audio)
    assert e.shape == (4,) and torch.equal(e, tiny_oracles.embed_semantics(audio))
    with pytest.raises(ValueError):
        tiny_oracles.embed_semantics(np.zeros((0, 26)))


def test_suite_round_trip(tiny_oracles, tmp_path):
    digest = tiny_oracles.save(tmp_path / "o")
    back, back_digest = OracleSuite.load(tmp_path / "o")
    assert digest == back_digest == bundle_hash(tmp_path / "o")
    x = torch.rand(2, 3, 8, 8)
    assert torch.equal(back.probe(x), tiny_oracles.probe(x))
    assert back.seeds == tiny_oracles.seeds and back.sync.fitted
    with pytest.raises(FileNotFoundError):
        OracleSuite.load(tmp_path / "none")
