import os
from pathlib import Path

import numpy as np
import pytest

from nncertify.dataset import LabeledSet, load_idx

MNIST_DIR = Path(os.environ.get("NNCERTIFY_MNIST", "/root/data/mnist"))


def _idx(stem):
    for name in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            p = MNIST_DIR / (name + suffix)
            if p.exists():
                return p
    return None


@pytest.fixture(scope="session")
def mnist():
    """(train, test) MNIST LabeledSets; skipped when the IDX files are absent."""
    files = [_idx(s) for s in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
    if any(f is None for f in files):
        pytest.skip(f"MNIST IDX files not found under {MNIST_DIR} (set NNCERTIFY_MNIST)")
    return load_idx(files[0], files[1]), load_idx(files[2], files[3])


def make_set(pixels, labels, names=("a", "b")):
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 1:
        pixels = pixels[:, None]
    return LabeledSet(pixels, labels, (1, 1, pixels.shape[1]), names)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
