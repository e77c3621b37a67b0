import numpy as np
import pytest

from stac import offline
from stac.synth import moving_shapes_sequence
from stac.tables import RegionGrid
from stac.toyseg import ToySegmenter


@pytest.fixture(scope="session")
def toy():
    return ToySegmenter.from_fixture()


@pytest.fixture(scope="session")
def shapes10(toy):
    frames, labels = moving_shapes_sequence(10, 96, 64, seed=3)
    return frames, labels


@pytest.fixture(scope="session")
def calibrated(toy, shapes10):
    """(gbar, tables, ladder, B) calibrated on the first shapes frames."""
    frames, _ = shapes10
    gbar = offline.corpus_frequency_gradients(frames[:3], toy)
    m = offline.coefficient_count(frames[0])
    b0 = gbar.luma.mean() * m * 8.0
    tables, ladder = offline.build_table_set(gbar, b0, m)
    return gbar, tables, ladder, float(ladder.levels[8])


@pytest.fixture
def grid():
    return RegionGrid(3, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
