import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from patch_actor.actionhead import TrainConfig, train  # noqa: E402
from patch_actor.synthgui import gen_dataset  # noqa: E402

# Reference configuration: 16x12 grid, d=32, C=8, five elements per screen.
TRAIN_SEED, HELDOUT_SEED = 1, 2
N_TRAIN_SCREENS, N_HELDOUT_SCREENS = 1000, 100


@pytest.fixture(scope="session")
def train_records():
    return gen_dataset(TRAIN_SEED, N_TRAIN_SCREENS, n_elements=5)


@pytest.fixture(scope="session")
def heldout_records():
    return gen_dataset(HELDOUT_SEED, N_HELDOUT_SCREENS, n_elements=5)


@pytest.fixture(scope="session")
def reference_run(train_records):
    """Trains the default model once per session (about two minutes).

    Returns (TrainResult, wall seconds including target preparation).
    """
    t0 = time.perf_counter()
    result = train(train_records, TrainConfig(seed=0))
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def reference_model(reference_run):
    return reference_run[0].model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
