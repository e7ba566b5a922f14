from __future__ import annotations

import numpy as np
import pytest
import torch

from protox.corridor import CorridorConfig, CorridorEnv, ScriptedExpert
from protox.demonstrations import collect
from protox.pretrain import Encoder, EncoderConfig

torch.set_default_dtype(torch.float32)

# small renders keep the encoder tests fast: 16x16 pixels, 2x2-pixel tiles
TINY_RENDER = (16, 16)


def tiny_corridor(**kw) -> CorridorConfig:
    base = dict(width=40, render_size=TINY_RENDER, min_gap=6, max_gap=10)
    base.update(kw)
    return CorridorConfig(**base)


def tiny_encoder_config(stack_depth: int = 2) -> EncoderConfig:
    return EncoderConfig(stack_depth=stack_depth, frame_shape=(16, 16, 3), widths=(4, 8), latent_channels=4)


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = tiny_corridor()
    return collect(lambda s: CorridorEnv(cfg.with_seed(s)), ScriptedExpert(), 400, seed=3, stack_depth=2)


@pytest.fixture(scope="session")
def tiny_encoder():
    torch.manual_seed(0)
    return Encoder(tiny_encoder_config()).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines are collected by tests/test_acceptance.py and echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
