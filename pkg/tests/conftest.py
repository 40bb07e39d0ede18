import numpy as np
import pytest
from hypothesis import settings

from wsevo.dataset import SynthConfig, generate_synthetic, split_dataset
from wsevo.preprocess import DatasetStats, compute_dsm_sigma, prepare_samples

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_split(n=64, tile_px=32, seed=0, **synth):
    samples = generate_synthetic(SynthConfig(n=n, tile_px=tile_px, **synth), seed)
    train_ids, test_ids = split_dataset(samples, (8, 2), seed)
    stats = DatasetStats(compute_dsm_sigma([samples[i].dsm for i in train_ids]))
    data = prepare_samples(samples, stats)
    return data.subset(train_ids), data.subset(test_ids)


@pytest.fixture(scope="session")
def tiny_split():
    """16 tiles of 8x8 px: cheap enough for many training runs."""
    return make_split(n=16, tile_px=8, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
