import numpy as np
import pytest

from leafcnn.data_pipeline import load_registry
from leafcnn.synthetic import gen_minivillage


@pytest.fixture(scope="session")
def registry():
    return load_registry()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A tiny shared synthetic corpus: 38 classes x 6 images at 32 px."""
    root = tmp_path_factory.mktemp("corpus")
    records = gen_minivillage(root, seed=3, images_per_class=6, size=32)
    return root, records


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
