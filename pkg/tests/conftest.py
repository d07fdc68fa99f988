import numpy as np
import pytest
import torch

from cnnmtt.model import build_model, encoder_decoder_spec
from cnnmtt.raster import GridSpec

torch.set_num_threads(1)


def tiny_spec(history_length=2, channels=8, kernel_size=5):
    """2 encoder, 1 hidden, 2 decoder layers."""
    return encoder_decoder_spec(
        history_length, channels=channels, hidden_channels=channels, kernel_size=kernel_size,
        n_encoder=2, n_hidden=1, n_decoder=2,
    )


@pytest.fixture
def tiny_model():
    return build_model(tiny_spec(), init_seed=3)


@pytest.fixture
def small_grid():
    # 32 px at the default resolution
    return GridSpec.centered(250.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
