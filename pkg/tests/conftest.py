from dataclasses import replace

import numpy as np
import pytest

from landslide_seg.config import desk_config
from landslide_seg.data.preprocess import prepare_sample
from landslide_seg.data.synthetic import generate_synthetic_dataset


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs")
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Collects criterion lines for the end-of-run summary."""
    return request.config.stash[ACCEPTANCE_LINES]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    """Desk config shrunk further for 64x64 scenes and fast steps."""
    cfg = desk_config(**{"contrastive.L": 32, "contrastive.M": 16, "contrastive.K": 8,
                         "train.epochs": 2})
    cfg.synthetic = replace(cfg.synthetic, size=(64, 64), min_candidates=8)
    return cfg


@pytest.fixture(scope="session")
def tiny_scenes(tiny_cfg):
    return [prepare_sample(s) for s in generate_synthetic_dataset(6, tiny_cfg.synthetic,
                                                                  tiny_cfg.contrastive)]
