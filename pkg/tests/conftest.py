import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from uapsga import data, models  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
DIGITS_IMAGES = ROOT / "data" / "digits5k-images-idx3-ubyte.gz"
DIGITS_LABELS = ROOT / "data" / "digits5k-labels-idx1-ubyte.gz"

# Reduced widths keep every architecture under 10k parameters for exhaustive gradient checks.
SMALL_WIDTHS = {"mlp-2": (16,), "cnn-small": (4, 8), "cnn-wide": (8, 16)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    return data.synth_blobs(4, 40, (1, 8, 8), seed=3)


@pytest.fixture(scope="session")
def trained_mlp(blobs):
    net = models.build("mlp-2", (1, 8, 8), 4, seed=0, widths=(32,))
    models.train(net, blobs, epochs=10, learning_rate=0.1, batch_size=16, seed=0)
    return net


@pytest.fixture(scope="session")
def trained_cnn(blobs):
    net = models.build("cnn-small", (1, 8, 8), 4, seed=1, widths=(4, 8))
    models.train(net, blobs, epochs=10, learning_rate=0.1, batch_size=16, seed=1)
    return net
