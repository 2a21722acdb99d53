import numpy as np
import pytest
import torch

from embleak.decoder import ToyDecoder, WordTokenizer

ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training experiments")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_tokenizer():
    return WordTokenizer.build(["hello world", "the cat sat on the mat", "a b c d"])


@pytest.fixture
def tiny_decoder(tiny_tokenizer):
    torch.manual_seed(0)
    return ToyDecoder(len(tiny_tokenizer), 6, hidden=16, layers=2, heads=2, generator=torch.Generator().manual_seed(0))
