"""Checkpoint directories.

Layout::

    <dir>/manifest.json      format version, config, stage history, parameter index,
                             frozen prefixes, oracle bundle hash
    <dir>/params/<name>.f32  one raw blob per tensor (see ``blobs``)
    <dir>/oracles/           oracle bundle (its own manifest + blobs)
"""

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .blobs import ChecksumError, read_blob, write_blob
from .model import TalkingHead
from .oracles import OracleSuite

FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


class VersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class StageError(CheckpointError):
    """The checkpoint lacks a stage that the requested one builds on."""


class FrozenParameterError(RuntimeError):
    pass


@dataclass
class RunState:
    """Model, oracles and provenance travelling between stages."""

    cfg: dict
    model: TalkingHead
    oracles: OracleSuite = None
    stages: list = field(default_factory=list)
    frozen: list = field(default_factory=list)
    oracle_hash: str = None

    def completed(self, stage):
        return any(s["stage"] == stage for s in self.stages)

    def require(self, stage):
        if not self.completed(stage):
            done = [s["stage"] for s in self.stages] or ["nothing"]
            raise StageError(f"this step needs a checkpoint that has completed {stage} (has: {', '.join(done)})")

    def freeze(self, prefixes):
        self.frozen = sorted(set(self.frozen) | set(prefixes))


def is_frozen(name, frozen):
    return any(name == p or name.startswith(p if p.endswith(".") else p + ".") for p in frozen)


def select_trainable(model, prefixes, frozen):
    """Enable gradients exactly for parameters under ``prefixes``; refuse anything frozen."""
    clash = [p for p in prefixes if is_frozen(p, frozen) or any(is_frozen(f, [p]) for f in frozen)]
    if clash:
        raise FrozenParameterError(f"refusing to update frozen parameters: {clash}")
    params = []
    for name, p in model.named_parameters():
        train = is_frozen(name, prefixes)
        p.requires_grad_(train)
        if train:
            params.append(p)
    if not params and prefixes:
        raise ValueError(f"no parameters match {prefixes}")
    return params


def param_hash(model, prefixes=None):
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        if prefixes is None or is_frozen(name, prefixes):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(state: RunState, root):
    root = Path(root)
    if root.exists():
        shutil.rmtree(root)
    (root / "params").mkdir(parents=True)
    params = {}
    for name, tensor in state.model.state_dict().items():
        rel = f"params/{name}.f32"
        params[name] = {"path": rel} | write_blob(root / rel, tensor.detach().cpu().numpy())
    oracle = None
    if state.oracles is not None:
        oracle = {"path": "oracles", "sha256": state.oracles.save(root / "oracles")}
        state.oracle_hash = oracle["sha256"]
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": state.cfg,
        "stages": state.stages,
        "frozen": state.frozen,
        "oracle_bundle": oracle,
        "params": params,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"checkpoint format {manifest.get('format_version')} != {FORMAT_VERSION}")
    return manifest


def load_checkpoint(root, load_oracles=True) -> RunState:
    root = Path(root)
    manifest = read_manifest(root)
    model = TalkingHead(manifest["config"]["model"])
    expected = model.state_dict()
    if set(expected) != set(manifest["params"]):
        missing = sorted(set(expected) - set(manifest["params"]))
        extra = sorted(set(manifest["params"]) - set(expected))
        raise ShapeMismatchError(f"parameter sets differ; missing {missing[:5]}, unexpected {extra[:5]}")
    state_dict = {}
    for name, info in manifest["params"].items():
        if list(expected[name].shape) != list(info["shape"]):
            raise ShapeMismatchError(f"{name}: checkpoint shape {info['shape']} vs model {list(expected[name].shape)}")
        state_dict[name] = torch.from_numpy(read_blob(root / info["path"], info["shape"], info["sha256"]))
    model.load_state_dict(state_dict)
    oracles, ohash = None, None
    bundle = manifest.get("oracle_bundle")
    if bundle and load_oracles:
        oracles, ohash = OracleSuite.load(root / bundle["path"])
        if ohash != bundle["sha256"]:
            raise ChecksumError("oracle bundle hash does not match the checkpoint manifest")
    return RunState(manifest["config"], model, oracles, manifest["stages"], manifest["frozen"], ohash)
