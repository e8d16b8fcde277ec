import numpy as np
import pytest
from hypothesis import settings

from crowdrank.data import ingest
from crowdrank.encoders import make_mock_count_encoder
from crowdrank.synthetic import make_eval_fixture, make_train_fixture

settings.register_profile("crowdrank", max_examples=40, deadline=None)
settings.load_profile("crowdrank")


@pytest.fixture
def mock_encoders():
    return make_mock_count_encoder(seed=0)


@pytest.fixture(scope="session")
def eval_fixture(tmp_path_factory):
    """20 planted tile images with matching head points, split 'test'."""
    root = tmp_path_factory.mktemp("eval_fixture")
    manifest_path = make_eval_fixture(root, n_images=20, p=3, seed=0)
    return ingest(manifest_path, name="synthetic")


@pytest.fixture(scope="session")
def train_fixture_consistent(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_consistent")
    return ingest(make_train_fixture(root, n_images=6, m=6, size=256, seed=1,
                                     consistent=True), name="toy-consistent")


@pytest.fixture(scope="session")
def train_fixture_shuffled(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_shuffled")
    return ingest(make_train_fixture(root, n_images=10, m=6, size=256, seed=3,
                                     consistent=False), name="toy-shuffled")


@pytest.fixture
def gradient_image(tmp_path):
    """Deterministic non-constant test image on disk."""
    yy, xx = np.mgrid[0:600, 0:600]
    pixels = np.stack([(xx * 255 // 599), (yy * 255 // 599), ((xx + yy) % 256)],
                      axis=-1).astype(np.uint8)
    from crowdrank.synthetic import write_png

    path = tmp_path / "gradient.png"
    write_png(path, pixels)
    return path, pixels
