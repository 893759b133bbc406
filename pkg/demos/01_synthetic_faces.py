"""Synthetic faces: each factor moves only its own pixels.

Renders one identity, then changes mouth opening, head yaw and valence one at a
time and reports where the pixels changed.  Writes the frames as PNGs.
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from orthotalk.pipeline import write_clip
from orthotalk.synthdata import FaceAttrs, random_identity, render_face

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/faces")
size = 64
ident = random_identity(np.random.default_rng(3))
base = FaceAttrs(0.2, 0.0, 0.0, ident)
img, mask = render_face(base, size)
mask = mask > 0.5
print(f"mouth mask covers {100 * mask.mean():.1f}% of the frame")

frames = [img]
for name, edit in [("mouth", dict(mouth_open=0.9)), ("pose", dict(pose_yaw=30.0)), ("valence", dict(expr_valence=0.9))]:
    other, _ = render_face(replace(base, **edit), size)
    moved = np.abs(other - img).sum(-1) > 1e-6
    inside = (moved & mask).sum() / max(moved.sum(), 1)
    rows = np.nonzero(moved.any(1))[0]
    print(f"{name:8s} changed {moved.sum():4d} px, {100 * inside:5.1f}% inside the mouth mask, rows {rows.min()}-{rows.max()}")
    frames.append(other)

write_clip(np.stack(frames), out)
print("wrote", out)
