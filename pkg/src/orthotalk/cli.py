"""Command-line entry point.

Exit status: 0 success, 1 usage/config error, 2 data or checkpoint error,
3 numerical failure.  Logs go to stderr; artifacts go to ``--out``.
"""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .blobs import ChecksumError
from .checkpoint import CheckpointError, FrozenParameterError, RunState, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config, overlay_config
from .model import TalkingHead
from .oracles import OracleFitError, OracleSuite, UnfittedOracleError
from .synthdata import (ManifestError, ManifestSource, SynthSource, TranscriptTokens, make_dataset, read_manifest,
                        sample_stage2_clip)
from .training import NumericalFailure

log = logging.getLogger("orthotalk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TRAIN_COMMANDS = {
    "pretrain-ae": None,
    "train-stage1": "pretrain-ae",
    "train-stage2": "train-stage1",
    "train-audio-lip": "train-stage1",
    "train-audio-pose": "train-audio-lip",
    "train-audio-exp": "train-stage2",
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p, ckpt=False, out=True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
    if ckpt:
        p.add_argument("--ckpt", required=True, help="input checkpoint directory")
    if out:
        p.add_argument("--out", required=True, help="output path")


def build_parser():
    parser = _Parser(prog="orthotalk", description="Train, run and evaluate the orthogonal-motion talking-head model.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-data", help="write a synthetic dataset directory")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)

    for name, prev in TRAIN_COMMANDS.items():
        p = sub.add_parser(name, help=f"training stage {name}")
        _common(p, ckpt=prev is not None)
        p.add_argument("--data", help="dataset directory (default: generate synthetic data on the fly)")
        p.add_argument("--iters", type=int)
        p.add_argument("--log", help="loss CSV path (default: <out>_losses.csv next to the checkpoint)")
        if prev is None:
            p.add_argument("--oracles", help="reuse a saved oracle bundle instead of fitting one")

    p = sub.add_parser("infer-video", help="animate an identity frame from driving clips")
    _common(p, ckpt=True)
    p.add_argument("--identity", required=True, help="clip source (see README)")
    p.add_argument("--mouth")
    p.add_argument("--pose")
    p.add_argument("--exp")

    p = sub.add_parser("infer-audio", help="animate an identity frame from audio features")
    _common(p, ckpt=True)
    p.add_argument("--identity", required=True)
    p.add_argument("--audio", required=True, help="clip source providing audio (or an .npy N x F array)")
    p.add_argument("--transcript", help="space-separated words; 'source' uses the audio clip's transcript")
    p.add_argument("--pose-seed", type=int, default=0)

    p = sub.add_parser("manipulate", help="interpolate between two expression references")
    _common(p, ckpt=True)
    p.add_argument("--identity", required=True)
    p.add_argument("--exp1", required=True)
    p.add_argument("--exp2", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--mouth")
    p.add_argument("--pose")

    p = sub.add_parser("eval-disentangle", help="leakage matrix and self-reconstruction PSNR")
    _common(p, ckpt=True)
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


# ------------------------------------------------------------------ helpers


def _source(cfg):
    d, m = cfg["data"], cfg["model"]
    if d["root"]:
        return ManifestSource(read_manifest(d["root"]), m["window_K"])
    return SynthSource(d["synth_seed"], d["size"], m["image_size"], d["clip_length"], m["window_K"])


def _load(path):
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def load_source(spec, image_size):
    """A clip from ``synth:SEED``, ``DATASET_DIR:INDEX``, a clip directory or a PNG."""
    from .pipeline import read_clip

    if spec.startswith("synth:"):
        return sample_stage2_clip(int(spec.split(":", 1)[1]), size=image_size)
    head, _, tail = spec.rpartition(":")
    if head and tail.isdigit() and (Path(head) / "manifest.jsonl").exists():
        return read_manifest(head).clip(int(tail))
    if not Path(spec).exists():
        raise DataError(f"no such clip source: {spec}")
    return read_clip(spec)


def _frames(spec, image_size):
    if spec is None:
        return None
    clip = load_source(spec, image_size)
    frames = getattr(clip, "frames", clip)
    if frames.shape[1:3] != (image_size, image_size):
        raise DataError(f"{spec}: frames are {frames.shape[1]}px, the model expects {image_size}px")
    return frames


def _write_json(path, payload):
    text = json.dumps(payload, indent=1, sort_keys=True)
    if path == "-":
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


# ----------------------------------------------------------------- commands


def cmd_make_data(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"data.synth_seed={args.seed}")
    if args.size is not None:
        overrides.append(f"data.size={args.size}")
    cfg = load_config(args.config, overrides)
    d, m = cfg["data"], cfg["model"]
    records = make_dataset(args.out, d["synth_seed"], d["size"], d["clip_length"], m["image_size"], m["window_K"])
    digest = hashlib.sha256((Path(args.out) / "manifest.jsonl").read_bytes()).hexdigest()
    print(json.dumps({"clips": len(records), "manifest_sha256": digest}))


def cmd_train(args):
    from .audio_training import train_audio_exp, train_audio_lip, train_audio_pose
    from .stage1 import train_stage1
    from .stage2 import train_stage2
    from .training import pretrain_autoencoder

    if args.command == "pretrain-ae":
        cfg = load_config(args.config, args.set)
        state = RunState(cfg, TalkingHead.from_config(cfg))
    else:
        state = _load(args.ckpt)
        state.cfg = overlay_config(state.cfg, args.config, args.set)
    if args.data:
        state.cfg["data"]["root"] = args.data
    if args.iters is not None:
        state.cfg["train"]["iters"] = args.iters
    state.cfg["train"]["stage"] = args.command
    if args.command == "pretrain-ae":
        if args.oracles:
            state.oracles, state.oracle_hash = OracleSuite.load(args.oracles)
        else:
            state.oracles = OracleSuite.build(state.cfg["oracle"], state.cfg["model"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.log or out.parent / f"{out.name}_losses.csv"
    trainer = {
        "pretrain-ae": pretrain_autoencoder, "train-stage1": train_stage1, "train-stage2": train_stage2,
        "train-audio-lip": train_audio_lip, "train-audio-pose": train_audio_pose, "train-audio-exp": train_audio_exp,
    }[args.command]
    torch.manual_seed(state.cfg["train"]["seed"])
    trainer(state, _source(state.cfg), log_path=log_path)
    save_checkpoint(state, out)
    log.info("wrote %s (losses in %s)", out, log_path)


def cmd_infer_video(args):
    from .pipeline import infer_video, write_clip

    state = _load(args.ckpt)
    size = state.model.image_size
    ident = _frames(args.identity, size)[:1]
    frames = infer_video(state.model, ident, _frames(args.mouth, size), _frames(args.pose, size),
                         _frames(args.exp, size), K=state.cfg["model"]["window_K"])
    index = write_clip(frames, args.out, {"command": "infer-video", "identity": args.identity, "mouth": args.mouth,
                                          "pose": args.pose, "exp": args.exp})
    print(json.dumps({"frames": index["count"], "sha256": index["sha256"]}))


def cmd_infer_audio(args):
    from .pipeline import infer_audio, write_clip

    state = _load(args.ckpt)
    size = state.model.image_size
    ident = _frames(args.identity, size)[:1]
    if args.audio.endswith(".npy"):
        audio, source_tokens = np.load(args.audio), None
    else:
        clip = load_source(args.audio, size)
        if not hasattr(clip, "audio"):
            raise DataError(f"{args.audio} carries no audio features")
        audio, source_tokens = clip.audio, clip.transcript
    transcript = None
    if args.transcript == "source":
        transcript = source_tokens
    elif args.transcript:
        try:
            transcript = TranscriptTokens.from_words(args.transcript.split())
        except ValueError as exc:
            raise DataError(f"transcript word outside the vocabulary: {exc}") from None
    frames = infer_audio(state.model, state.oracles, ident, audio, transcript, args.pose_seed)
    index = write_clip(frames, args.out, {"command": "infer-audio", "pose_seed": args.pose_seed})
    print(json.dumps({"frames": index["count"], "sha256": index["sha256"]}))


def cmd_manipulate(args):
    from .pipeline import manipulate, write_clip

    if not 0.0 <= args.alpha <= 1.0:
        raise UsageError("--alpha must lie in [0, 1]")
    state = _load(args.ckpt)
    size = state.model.image_size
    frames = manipulate(state.model, _frames(args.identity, size)[:1], _frames(args.exp1, size),
                        _frames(args.exp2, size), args.alpha, _frames(args.mouth, size), _frames(args.pose, size),
                        K=state.cfg["model"]["window_K"])
    index = write_clip(frames, args.out, {"command": "manipulate", "alpha": args.alpha})
    print(json.dumps({"frames": index["count"], "sha256": index["sha256"]}))


def cmd_eval(args):
    from .pipeline import eval_disentangle

    state = _load(args.ckpt)
    if state.oracles is None:
        raise UnfittedOracleError("checkpoint carries no oracle bundle")
    state.oracles.require_probe()
    components = ["mouth", "pose"] + (["expression"] if state.completed("train-stage2") else [])
    report = eval_disentangle(state.model, state.oracles.probe, args.seed, args.pairs, components)
    _write_json(args.out, report)


COMMANDS = {"make-data": cmd_make_data, "infer-video": cmd_infer_video, "infer-audio": cmd_infer_audio,
            "manipulate": cmd_manipulate, "eval-disentangle": cmd_eval} | {k: cmd_train for k in TRAIN_COMMANDS}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError, OracleFitError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (CheckpointError, ChecksumError, ManifestError, DataError, FrozenParameterError, UnfittedOracleError,
            FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
