import numpy as np
import pytest
import torch

from orthotalk.checkpoint import RunState
from orthotalk.config import make_config
from orthotalk.model import TalkingHead
from orthotalk.oracles import OracleSuite

TINY = [
    "model.image_size=8",
    "model.channels=[4,8]",
    "model.latent_dim=16",
    'model.bank_sizes={"mouth":4,"pose":2,"expression":3}',
    "model.audio_dim=8",
    "model.text_dim=4",
    "model.sync_dim=8",
    "model.flow_steps=2",
    "model.window_K=3",
    "train.batch=2",
    "train.iters=2",
    "data.size=8",
    "data.clip_length=6",
    "oracle.probe_iters=5",
    "oracle.sync_iters=5",
    "oracle.fit_thresholds.probe_r2=-1e9",
    "oracle.fit_thresholds.sync_margin=-1e9",
]


def tiny_config(*extra):
    return make_config(TINY + list(extra))


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    return TalkingHead.from_config(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_oracles():
    """Quickly 'fitted' oracles at 8 px: interface-complete, not accurate."""
    cfg = tiny_config()
    torch.manual_seed(0)
    return OracleSuite.build(cfg["oracle"], cfg["model"])


@pytest.fixture
def tiny_state(tiny_cfg, tiny_model, tiny_oracles):
    return RunState(tiny_cfg, tiny_model, tiny_oracles)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_relative_error(loss_fn, params, n_probe=12, eps=1e-6, seed=0):
    """Relative error between autograd and central differences on sampled entries of ``params``.

    ``loss_fn`` must be a closure over double-precision tensors.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    g = torch.Generator().manual_seed(seed)
    analytic, numeric = [], []
    for p in params:
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        picks = torch.randperm(flat.numel(), generator=g)[:n_probe]
        for i in picks.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(grad[i].item())
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12))


@pytest.fixture
def tiny_source():
    from orthotalk.synthdata import SynthSource

    return SynthSource(0, 8, 8, 6, 3)


@pytest.fixture
def pretrained_state(tiny_state, tiny_source):
    """A tiny state that has gone through a single pretraining iteration."""
    from orthotalk.training import pretrain_autoencoder

    pretrain_autoencoder(tiny_state, tiny_source, iters=1)
    return tiny_state


@pytest.fixture
def stage1_state(pretrained_state, tiny_source):
    from orthotalk.stage1 import train_stage1

    train_stage1(pretrained_state, tiny_source, iters=1)
    return pretrained_state


ACCEPT = ["model.image_size=32", "model.channels=[24,48,96]", "train.log_every=100"]


def accept_config(*extra):
    return make_config(ACCEPT + list(extra))


def cache_dir():
    """Optional on-disk cache for the expensive acceptance artifacts (set ORTHOTALK_ACCEPT_CACHE)."""
    import os
    from pathlib import Path

    root = os.environ.get("ORTHOTALK_ACCEPT_CACHE")
    if not root:
        return None
    Path(root).mkdir(parents=True, exist_ok=True)
    return Path(root)


@pytest.fixture(scope="session")
def fitted_oracles():
    """Oracles fitted to their real thresholds at the 32 px acceptance resolution."""
    cache = cache_dir()
    if cache is not None and (cache / "oracles" / "manifest.json").exists():
        return OracleSuite.load(cache / "oracles")[0]
    cfg = accept_config()
    suite = OracleSuite.build(cfg["oracle"], cfg["model"])
    if cache is not None:
        suite.save(cache / "oracles")
    return suite


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
