import gzip
import struct

import numpy as np
import pytest

from circuitforge.geommlp import GeomMlp, LayerSpec
from circuitforge.mnistdata import Dataset
from circuitforge.settings import data_files


def write_idx_pair(directory, stem, images, labels, gz=False, images_magic=0x00000803, labels_magic=0x00000801):
    """Writes uint8 images (n, rows, cols) and labels (n,) as IDX files, returning their paths."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    image_bytes = struct.pack(">IIII", images_magic, n, rows, cols) + images.tobytes()
    label_bytes = struct.pack(">II", labels_magic, len(labels)) + labels.tobytes()
    suffix = ".gz" if gz else ""
    image_path = directory / f"{stem}-images{suffix}"
    label_path = directory / f"{stem}-labels{suffix}"
    opener = gzip.compress if gz else (lambda raw: raw)
    image_path.write_bytes(opener(image_bytes))
    label_path.write_bytes(opener(label_bytes))
    return image_path, label_path


def synthetic_digits(n, side, seed):
    """Learnable toy digits: every class has a fixed random prototype, samples add byte noise to it."""
    rng = np.random.default_rng(seed)
    prototypes = np.random.default_rng(1234).integers(0, 256, size=(10, side, side))
    labels = np.arange(n) % 10
    noise = rng.integers(-30, 31, size=(n, side, side))
    images = np.clip(prototypes[labels] + noise, 0, 255).astype(np.uint8)
    return images, labels.astype(np.uint8)


def write_mnist_dir(data_dir):
    """Fills data_dir with the four canonical MNIST file names holding small synthetic 28x28 contents."""
    data_dir.mkdir(parents=True, exist_ok=True)
    for split, n, seed in (("train", 300, 0), ("test", 200, 1)):
        images, labels = synthetic_digits(n, 28, seed)
        image_path, label_path = write_idx_pair(data_dir, split, images, labels)
        image_path.rename(data_dir / data_files[f"{split}_images"])
        label_path.rename(data_dir / data_files[f"{split}_labels"])
    return data_dir


@pytest.fixture
def mnist_dir(tmp_path):
    return write_mnist_dir(tmp_path / "mnist")


@pytest.fixture
def toy_dataset():
    """A small learnable dataset of 6x6 images with all ten digits."""
    images, labels = synthetic_digits(400, 6, 0)
    return Dataset(images.reshape(len(images), -1) / 255.0, labels.astype(np.int64), "train")


@pytest.fixture
def toy_model():
    """Factory for randomly initialized toy models."""

    def make(widths=(8, 4, 4, 2), seed=3, activation="silu", layer_spacing=1.0):
        return GeomMlp.init_random(LayerSpec(widths, layer_spacing), seed, activation)

    return make
