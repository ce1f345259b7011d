import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from rgbdvos.synthetic import moving_squares  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def squares():
    return moving_squares(n_frames=5, size=64, seed=3)


@pytest.fixture(scope="session")
def trained_model():
    """Toy model trained on four synthetic sequences (held-out seeds >= 100)."""
    from rgbdvos.training import OptimizerConfig, fit_toy
    train = [moving_squares(8, 64, seed=s) for s in range(1, 5)]
    return fit_toy(train, 300, OptimizerConfig(lr=1e-3)).model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
