"""MNIST loading from IDX files and construction of clean/corrupted task pools."""

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from circuitforge.errors import (
    ConsistencyError,
    EmptyDatasetError,
    EmptyPoolError,
    IdxFormatError,
    TruncatedFileError,
)
from circuitforge.settings import DATA_DIR_ENV, data_files

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """An ordered, immutable collection of images. Pixels are stored as an (n, rows * cols) float64 array in
    [0, 1] and labels as an (n,) integer array, both in load order."""

    pixels: np.ndarray
    labels: np.ndarray
    split_tag: str

    def __post_init__(self):
        if len(self.labels) == 0:
            raise EmptyDatasetError(f"Dataset '{self.split_tag}' has no samples")
        if len(self.pixels) != len(self.labels):
            raise ConsistencyError(
                f"Dataset '{self.split_tag}' has {len(self.pixels)} images but {len(self.labels)} labels"
            )
        self.pixels.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, index):
        # Integer indexing gives one sample, array indexing a resampled Dataset
        if np.ndim(index) == 0:
            return ImageSample(self.pixels[index], int(self.labels[index]))
        return self.subset(index)

    def subset(self, indices, split_tag=None):
        """Returns the samples at indices (in the given order) as a new Dataset."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.pixels[indices].copy(),
            self.labels[indices].copy(),
            self.split_tag if split_tag is None else split_tag,
        )

    def digit_counts(self):
        """Number of samples per digit 0-9."""
        return np.bincount(self.labels, minlength=10)


@dataclass(frozen=True)
class TaskPairSet:
    task_name: str
    clean_digit: int
    corrupted_digit: int
    clean_pool: Dataset
    corrupted_pool: Dataset


def read_idx_bytes(path):
    """Reads the raw bytes of an IDX file, transparently decompressing gzip files."""
    with open(path, "rb") as f:
        raw = f.read()
    # gzip magic 1f 8b
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise TruncatedFileError(f"Could not decompress {path}: {e}") from e
    return raw


def parse_idx_header(raw, expected_magic, path):
    """Parses the big-endian magic number and dimensions of an IDX file, returning (dims, data_offset)."""
    if len(raw) < 4:
        raise TruncatedFileError(f"{path} is too short to contain an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path} has magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    # The low byte of the magic number gives the number of dimensions
    n_dims = magic & 0xFF
    header_end = 4 + 4 * n_dims
    if len(raw) < header_end:
        raise TruncatedFileError(f"{path} ends inside its IDX header")
    dims = struct.unpack(f">{n_dims}I", raw[4:header_end])
    return dims, header_end


def load_idx(images_path, labels_path, split_tag="train"):
    """Loads an IDX image file and its label file as a Dataset, scaling raw bytes by 1/255."""
    images_raw = read_idx_bytes(images_path)
    labels_raw = read_idx_bytes(labels_path)

    (n_images, rows, cols), image_offset = parse_idx_header(images_raw, IMAGES_MAGIC, images_path)
    (n_labels,), label_offset = parse_idx_header(labels_raw, LABELS_MAGIC, labels_path)

    image_bytes = n_images * rows * cols
    if len(images_raw) - image_offset < image_bytes:
        raise TruncatedFileError(
            f"{images_path} holds {len(images_raw) - image_offset} pixel bytes, header promises {image_bytes}"
        )
    if len(labels_raw) - label_offset < n_labels:
        raise TruncatedFileError(
            f"{labels_path} holds {len(labels_raw) - label_offset} label bytes, header promises {n_labels}"
        )
    if n_images != n_labels:
        raise ConsistencyError(f"{images_path} has {n_images} images but {labels_path} has {n_labels} labels")
    if n_images == 0:
        raise EmptyDatasetError(f"{images_path} contains no images")

    pixels = np.frombuffer(images_raw, dtype=np.uint8, count=image_bytes, offset=image_offset)
    pixels = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(labels_raw, dtype=np.uint8, count=n_labels, offset=label_offset).astype(np.int64)
    if labels.max() > 9:
        raise IdxFormatError(f"{labels_path} contains label {labels.max()}, expected digits 0-9")

    logger.debug("Loaded %d %dx%d images from %s", n_images, rows, cols, images_path)
    return Dataset(pixels, labels, split_tag)


def resolve_data_dir(data_dir=None):
    """Returns the data directory from the argument or the environment variable fallback."""
    if data_dir is None:
        data_dir = os.environ.get(DATA_DIR_ENV)
    if data_dir is None:
        raise FileNotFoundError(f"No data directory given and {DATA_DIR_ENV} is not set")
    return Path(data_dir)


def find_data_file(data_dir, key):
    """Locates one of the canonical MNIST files, accepting a .gz variant."""
    path = Path(data_dir) / data_files[key]
    if path.exists():
        return path
    gz_path = path.with_name(path.name + ".gz")
    if gz_path.exists():
        return gz_path
    raise FileNotFoundError(f"Neither {path} nor {gz_path} exists")


def data_file_paths(data_dir):
    """Paths of the four canonical MNIST files inside data_dir."""
    return {key: find_data_file(data_dir, key) for key in data_files}


def load_mnist(data_dir=None):
    """Loads the canonical MNIST train and test splits from data_dir."""
    data_dir = resolve_data_dir(data_dir)
    paths = data_file_paths(data_dir)
    train = load_idx(paths["train_images"], paths["train_labels"], "train")
    test = load_idx(paths["test_images"], paths["test_labels"], "test")
    logger.info("Loaded MNIST from %s: %d train / %d test samples", data_dir, len(train), len(test))
    return train, test


def build_pair_set(ds, clean_digit, corrupted_digit, task_name):
    """Splits out the clean and corrupted digit pools of a task, preserving dataset order."""
    if clean_digit == corrupted_digit:
        raise EmptyPoolError(f"Task '{task_name}': clean and corrupted digit are both {clean_digit}")
    clean_indices = np.flatnonzero(ds.labels == clean_digit)
    corrupted_indices = np.flatnonzero(ds.labels == corrupted_digit)
    for digit, indices in ((clean_digit, clean_indices), (corrupted_digit, corrupted_indices)):
        if len(indices) == 0:
            raise EmptyPoolError(f"Task '{task_name}': digit {digit} does not occur in the {ds.split_tag} split")
    return TaskPairSet(
        task_name,
        int(clean_digit),
        int(corrupted_digit),
        ds.subset(clean_indices, f"{ds.split_tag}:{clean_digit}"),
        ds.subset(corrupted_indices, f"{ds.split_tag}:{corrupted_digit}"),
    )
