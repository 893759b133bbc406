import logging

import numpy as np
import pytest
import torch

from orthotalk.networks import to_frames, to_tensor
from orthotalk.pipeline import (PSNR_CAP, eval_disentangle, expression_track, infer_audio, infer_video, manipulate,
                                psnr, read_clip, write_clip)
from orthotalk.synthdata import TranscriptTokens, sample_stage2_clip


def _clip(seed, n=6):
    return sample_stage2_clip(seed, length=n, K=3, size=8)


@pytest.fixture
def model(tiny_model):
    torch.manual_seed(0)
    with torch.no_grad():
        for g in tiny_model.eem.gains:
            g.fill_(0.5)
    return tiny_model.eval()


def test_no_sources_reduce_to_identity_render(model):
    ident = _clip(1).frames[:1]
    out = infer_video(model, ident)
    lat, feats = model.encoder(to_tensor(ident))
    with torch.no_grad():
        expect = to_frames(model.render(lat, feats, torch.zeros_like(lat)))
    assert out.shape == (1, 8, 8, 3) and np.array_equal(out, expect)
    assert np.array_equal(infer_video(model, ident), out)


def test_infer_video_deterministic_and_shaped(model):
    ident, drv = _clip(1).frames[:1], _clip(2).frames
    a = infer_video(model, ident, drv, drv, drv, K=3)
    b = infer_video(model, ident, drv, drv, drv, K=3)
    assert a.shape == (6, 8, 8, 3) and np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1


def test_length_mismatch_uses_shortest(model, caplog):
    ident = _clip(1).frames[:1]
    with caplog.at_level(logging.WARNING):
        out = infer_video(model, ident, _clip(2, 6).frames, _clip(3, 4).frames)
    assert len(out) == 4 and "shortest" in caplog.text


def test_expression_track_window_mean(model):
    frames = _clip(4).frames
    w = model.navigation.weights("expression", model.encoder(to_tensor(frames))[0])
    track = expression_track(model, frames, K=3)
    assert torch.allclose(track[2], w[1:4].mean(0), atol=1e-6)
    assert torch.allclose(track[0], (2 * w[0] + w[1]) / 3, atol=1e-6)
    assert torch.allclose(expression_track(model, frames, K=1), w, atol=1e-6)


def test_manipulate_endpoints_bitwise(model):
    ident, e1, e2, drv = _clip(1).frames[:1], _clip(5).frames, _clip(6).frames, _clip(7).frames
    one = manipulate(model, ident, e1, e2, 1.0, drv, drv, K=3)
    zero = manipulate(model, ident, e1, e2, 0.0, drv, drv, K=3)
    assert np.array_equal(one, infer_video(model, ident, drv, drv, e1, K=3))
    assert np.array_equal(zero, infer_video(model, ident, drv, drv, e2, K=3))
    with pytest.raises(ValueError):
        manipulate(model, ident, e1, e2, 1.5, K=3)


def test_infer_audio_seeds_and_transcript(model, tiny_oracles):
    ident, clip = _clip(1).frames[:1], _clip(8)
    a = infer_audio(model, tiny_oracles, ident, clip.audio, None, pose_seed=3)
    assert a.shape == (6, 8, 8, 3)
    assert np.array_equal(a, infer_audio(model, tiny_oracles, ident, clip.audio, None, pose_seed=3))
    assert np.array_equal(a, infer_audio(model, tiny_oracles, ident, clip.audio, TranscriptTokens([]), pose_seed=3))
    assert not np.array_equal(a, infer_audio(model, tiny_oracles, ident, clip.audio, None, pose_seed=4))
    with_text = infer_audio(model, tiny_oracles, ident, clip.audio, clip.transcript, pose_seed=3)
    assert with_text.shape == a.shape


def test_psnr_examples():
    x = np.random.default_rng(0).uniform(0, 0.9, (4, 4, 3))
    assert psnr(x, x) == PSNR_CAP
    assert psnr(x, x + 0.1) == pytest.approx(20.0)


def test_eval_disentangle_structure(model, tiny_oracles):
    report = eval_disentangle(model, tiny_oracles.probe, seed=1, count=4)
    leak = report["leakage"]
    assert report["components"] == ["mouth", "pose", "expression"]
    for x in leak:
        assert leak[x][x] == pytest.approx(1.0) or report["deltas"][x][x] == 0
        assert all(v >= 0 for v in leak[x].values())
    assert 0 < report["psnr_self"] <= PSNR_CAP
    again = eval_disentangle(model, tiny_oracles.probe, seed=1, count=4)
    assert again == report
    with pytest.raises(ValueError):
        eval_disentangle(model, None)


def test_clip_io_round_trip(tmp_path):
    frames = _clip(9).frames
    index = write_clip(frames, tmp_path / "c", {"k": 1})
    assert index["count"] == 6 and index["meta"] == {"k": 1}
    back = read_clip(tmp_path / "c")
    assert back.shape == frames.shape and np.abs(back - frames).max() <= 1 / 127.5 + 1e-6
    single = read_clip(tmp_path / "c" / "frame_00000.png")
    assert np.array_equal(single[0], back[0])
    again = write_clip(back, tmp_path / "d")
    assert again["sha256"] == index["sha256"]
    with pytest.raises(FileNotFoundError):
        read_clip(tmp_path / "missing")
