import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

import ktgraph as kt

_ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _ACCEPTANCE_RESULTS[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[nodeid]
        label = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"{label}  {nodeid.split('::')[-1]}")


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Easy 4-class shapes, enough signal to learn in a couple of epochs."""
    train = kt.synthetic_dataset(4, 24, 32, seed=5, noise=0.05)
    val = kt.synthetic_dataset(4, 8, 32, seed=99, noise=0.05)
    return train, val


def random_probs(rng: np.random.Generator, n: int, c: int) -> torch.Tensor:
    raw = rng.gamma(1.0, 1.0, size=(n, c))
    return torch.from_numpy(raw / raw.sum(axis=1, keepdims=True))
