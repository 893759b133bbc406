"""The whole training chain at toy scale, then video, audio and manipulation inference.

Runs in about a minute; the model is far too small and briefly trained to look
good, the point is the data flow and the stage bookkeeping.
"""

import sys
from pathlib import Path

import torch

from orthotalk.audio_training import train_audio_exp, train_audio_lip, train_audio_pose
from orthotalk.checkpoint import RunState, load_checkpoint, param_hash, save_checkpoint
from orthotalk.config import make_config
from orthotalk.model import TalkingHead
from orthotalk.oracles import OracleSuite
from orthotalk.pipeline import eval_disentangle, infer_audio, infer_video, manipulate, write_clip
from orthotalk.stage1 import train_stage1
from orthotalk.stage2 import train_stage2
from orthotalk.synthdata import SynthSource
from orthotalk.training import pretrain_autoencoder

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/chain")
cfg = make_config([
    "model.image_size=16", "model.channels=[8,16]", "model.latent_dim=32",
    'model.bank_sizes={"mouth":6,"pose":3,"expression":4}', "model.flow_steps=2",
    "train.iters=30", "train.log_every=10", "oracle.probe_iters=200", "oracle.sync_iters=100",
    "oracle.fit_thresholds.probe_r2=-1e9", "oracle.fit_thresholds.sync_margin=-1e9",
])
torch.manual_seed(0)
state = RunState(cfg, TalkingHead.from_config(cfg), OracleSuite.build(cfg["oracle"], cfg["model"]))
src = SynthSource(0, 64, 16, 12, 5)

for name, run in [("pretrain-ae", pretrain_autoencoder), ("train-stage1", train_stage1), ("train-stage2", train_stage2),
                  ("train-audio-lip", train_audio_lip), ("train-audio-pose", train_audio_pose),
                  ("train-audio-exp", train_audio_exp)]:
    history = run(state, src)
    first, last = history.rows[0], history.rows[-1]
    print(f"{name:17s} {history.columns[1]}: {first[1]:.4f} -> {last[1]:.4f}; frozen now {state.frozen}")

save_checkpoint(state, out / "ckpt")
state = load_checkpoint(out / "ckpt")
print("reloaded checkpoint, parameter hash", param_hash(state.model)[:16])

model, held = state.model, SynthSource(9, 8, 16, 12, 5)
ident = held.identity_frame(0)
clip = held.clip(1)
write_clip(infer_video(model, ident, clip.frames, clip.frames, clip.frames), out / "video")
write_clip(infer_audio(model, state.oracles, ident, clip.audio, clip.transcript, pose_seed=1), out / "audio")
write_clip(manipulate(model, ident, held.clip(2, 0.9).frames, held.clip(3, -0.9).frames, 0.5), out / "blend")
report = eval_disentangle(model, state.oracles.probe, count=16)
for x, row in report["leakage"].items():
    print(f"leakage {x:10s}", " ".join(f"{y}={v:.2f}" for y, v in row.items()))
print(f"self-reconstruction PSNR {report['psnr_self']:.1f} dB; clips written under {out}")
