"""Run configuration: nested JSON validated against a closed schema.

Command-line overrides use dotted paths (``model.latent_dim=512``); values are
parsed as JSON when possible, so ``train.loss_weights.mot=10`` yields a number.
"""

import copy
import json
import os
from pathlib import Path

import jsonschema

DEFAULTS = {
    "model": {
        "latent_dim": 64,
        "image_size": 64,
        "bank_sizes": {"mouth": 20, "pose": 6, "expression": 10},
        "channels": [32, 64, 128, 256],
        "eem_levels": 2,
        "flow_steps": 4,
        "window_K": 5,
        "audio_dim": 32,
        "mel_bins": 26,
        "text_dim": 16,
        "sync_dim": 64,
    },
    "train": {
        "stage": "pretrain-ae",
        "lr": 2e-3,
        "batch": 4,
        "iters": 2000,
        "seed": 0,
        "log_every": 50,
        "loss_weights": {
            "rec": 1.0, "per": 1.0, "adv": 0.1, "self": 1.0, "fea": 1.0,
            "mot": 10.0, "m_c": 1.0, "sync": 1.0, "mle": 1.0, "tem": 1.0, "exp": 1.0,
        },
    },
    "data": {"root": None, "synth_seed": 0, "size": 2000, "clip_length": 24},
    "oracle": {
        "seeds": {"perceptual": 11, "probe": 12, "sync": 13, "text": 14, "semantics": 15},
        "fit_thresholds": {"probe_r2": 0.95, "sync_margin": 0.3},
        "probe_iters": 1500,
        "sync_iters": 800,
    },
}

_num = {"type": "number"}
_int = {"type": "integer", "minimum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj({
    "model": _obj({
        "latent_dim": _int,
        "image_size": {"type": "integer", "minimum": 8},
        "bank_sizes": _obj({k: _int for k in ("mouth", "pose", "expression")}, ("mouth", "pose", "expression")),
        "channels": {"type": "array", "items": _int, "minItems": 1},
        "eem_levels": {"type": "integer", "minimum": 0},
        "flow_steps": _int,
        "window_K": _int,
        "audio_dim": _int,
        "mel_bins": _int,
        "text_dim": _int,
        "sync_dim": _int,
    }),
    "train": _obj({
        "stage": {"type": "string"},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch": _int,
        "iters": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "log_every": _int,
        "loss_weights": {"type": "object", "additionalProperties": _num},
    }),
    "data": _obj({
        "root": {"type": ["string", "null"]},
        "synth_seed": {"type": "integer"},
        "size": _int,
        "clip_length": _int,
    }),
    "oracle": _obj({
        "seeds": {"type": "object", "additionalProperties": {"type": "integer"}},
        "fit_thresholds": {"type": "object", "additionalProperties": _num},
        "probe_iters": _int,
        "sync_iters": _int,
    }),
})


class ConfigError(ValueError):
    pass


def _merge(base, update, path=""):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = copy.deepcopy(value)
    return base


def validate(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    m = cfg["model"]
    if sum(m["bank_sizes"].values()) > m["latent_dim"]:
        raise ConfigError("bank sizes exceed latent_dim")
    if m["image_size"] % 2 ** len(m["channels"]):
        raise ConfigError("image_size must be divisible by 2**len(channels)")
    if m["eem_levels"] > len(m["channels"]):
        raise ConfigError("eem_levels exceeds the number of encoder stages")
    if m["window_K"] % 2 == 0:
        raise ConfigError("window_K must be odd")
    return cfg


def set_dotted(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted}")
        node = node[k]
    if keys[-1] not in node and not (keys[-2:-1] and keys[-2] in ("loss_weights", "seeds", "fit_thresholds")):
        raise ConfigError(f"unknown config key {dotted}")
    node[keys[-1]] = value


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def make_config(overrides=None, base=None):
    """Defaults, then ``base`` (a dict), then ``overrides`` (dict of dotted keys or list of key=value)."""
    cfg = copy.deepcopy(DEFAULTS)
    if base:
        _merge(cfg, base)
    if "EDTALK_SEED" in os.environ and not (base or {}).get("train", {}).get("seed"):
        cfg["train"]["seed"] = int(os.environ["EDTALK_SEED"])
    items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides or ())
    for key, value in items:
        set_dotted(cfg, key, value)
    return validate(cfg)


def read_config_file(path):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} is not a JSON object")
    return data


def load_config(path=None, overrides=None):
    return make_config(overrides, read_config_file(path) if path is not None else None)


def overlay_config(base, path=None, overrides=None):
    """Apply a config file and overrides on top of an existing (checkpoint) config.

    Model settings are fixed by the checkpoint; changing them is an error.
    """
    cfg = _merge(copy.deepcopy(base), read_config_file(path) if path is not None else {})
    cfg = make_config(overrides, cfg)
    if cfg["model"] != make_config(None, base)["model"]:
        raise ConfigError("model settings are fixed by the checkpoint and cannot be overridden")
    return cfg
