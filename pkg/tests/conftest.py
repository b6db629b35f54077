import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

import pytest


@pytest.fixture(scope="session")
def trained_small():
    """A briefly trained default model shared by tests that need learned weights."""
    from dpseg.harness.config import TrainConfig
    from dpseg.harness.training import run_training
    return run_training(TrainConfig(steps=300, seed=0))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
