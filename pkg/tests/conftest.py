import numpy as np
import pytest
from hypothesis import settings

from transmia.data import LabeledDataset, SynthConfig, synth_generate

# Fixed example order keeps the suite reproducible run to run.
settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("repo")


def make_dataset(X, y, num_classes=None, id_offset=0):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    k = int(y.max()) + 1 if num_classes is None else num_classes
    return LabeledDataset(np.arange(id_offset, id_offset + len(y)), X, y, k)


@pytest.fixture
def two_blobs():
    """200 points around +-(2, 2) with sigma 0.3; labels 0 and 1."""
    gen = np.random.default_rng(7)
    y = np.repeat([0, 1], 100)
    centres = np.array([[-2.0, -2.0], [2.0, 2.0]])
    X = centres[y] + 0.3 * gen.standard_normal((200, 2))
    return make_dataset(X, y)


@pytest.fixture
def small_synth():
    return synth_generate(SynthConfig(class_count=4, dim=6, points_per_class=60,
                                      noise_sigma=0.5, seed=3))
