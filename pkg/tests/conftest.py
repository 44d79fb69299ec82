import numpy as np
import pytest
import torch

from oskdft.model import ModelConfig
from oskdft.init import random_store
from oskdft.speaker_head import SpeakerHeadConfig

TINY = ModelConfig(d_model=8, n_layers_teacher=4, n_layers_student=2, n_heads=2, ffn_mult=2,
                   adapter_rank=2, cnn_strides=(2, 2, 2))
TINY_HEAD = SpeakerHeadConfig("linear", embed_dim=4, n_speakers=3, margin=0.15, scale=20.0)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_student():
    return random_store(TINY, "student", seed=0, head=TINY_HEAD, adapter_init="random")


@pytest.fixture
def tiny_teacher():
    return random_store(TINY, "teacher", seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
