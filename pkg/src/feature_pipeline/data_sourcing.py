"""
Where the simulator's data comes from.

By default that is a synthetic set of Gaussian blobs (one per class), which keeps every
experiment at desk scale. MNIST-format IDX files can be loaded instead. Either way the
server keeps a stratified slice of the pool for itself as a test set, and the remainder
is what gets partitioned between the clients.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger
from sklearn.model_selection import train_test_split

from src.setup.exceptions import DataFormatError, LabelRangeError, ShapeMismatchError


IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)

        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeMismatchError(f"Features must be a non-empty (n x d) array, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeMismatchError("There must be exactly one label per sample")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise LabelRangeError(f"Every label must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(features=self.features[indices], labels=self.labels[indices], class_count=self.class_count)


def synth_blobs(seed: int, classes: int, dim: int, per_class: int, spread: float) -> Dataset:
    """
    One Gaussian cluster per class. Class means are standard normal vectors and samples
    are the mean plus spread-scaled standard normal noise.

    Args:
        seed (int): the seed of the generator that draws both the means and the noise.
        classes (int): the number of classes (at least 2)
        dim (int): the dimension of every sample
        per_class (int): how many samples each class gets
        spread (float): the standard deviation of the noise around each mean

    Returns:
        Dataset: samples ordered by class
    """
    if classes < 2:
        raise ValueError("There must be at least two classes")
    if per_class < 1:
        raise ValueError("Each class needs at least one sample")
    if spread < 0:
        raise ValueError("The spread cannot be negative")

    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, dim))

    logger.debug(f"Synthesised {labels.size} samples in {classes} classes of dimension {dim}")
    return Dataset(features=features, labels=labels, class_count=classes)


def _read_idx_header(payload: bytes, expected_magic: int, dimensions: int, source: Path) -> tuple[tuple[int, ...], int]:
    header_length = 4 * (1 + dimensions)
    if len(payload) < header_length:
        raise DataFormatError(f"{source} is too short to hold an IDX header")

    header = np.frombuffer(payload, dtype=">u4", count=1 + dimensions)
    if int(header[0]) != expected_magic:
        raise DataFormatError(f"{source} has magic number {int(header[0]):#010x}, expected {expected_magic:#010x}")

    return tuple(int(size) for size in header[1:]), header_length


def load_idx(images_path: Path, labels_path: Path) -> Dataset:
    """
    Load an MNIST-style pair of IDX files. The headers are big-endian, pixels are unsigned
    bytes and are scaled into [0, 1], and each image is flattened into one row.

    Raises:
        DataFormatError: on a bad magic number, a truncated file, or a count mismatch
                         between the two files.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    image_bytes = images_path.read_bytes()
    label_bytes = labels_path.read_bytes()

    (count, rows, cols), image_offset = _read_idx_header(image_bytes, IMAGES_MAGIC, dimensions=3, source=images_path)
    (label_count,), label_offset = _read_idx_header(label_bytes, LABELS_MAGIC, dimensions=1, source=labels_path)

    if count != label_count:
        raise DataFormatError(f"{images_path} holds {count} images but {labels_path} holds {label_count} labels")
    if count < 1:
        raise DataFormatError(f"{images_path} does not contain any images")
    if len(image_bytes) != image_offset + count * rows * cols:
        raise DataFormatError(f"{images_path} is truncated or has trailing bytes")
    if len(label_bytes) != label_offset + count:
        raise DataFormatError(f"{labels_path} is truncated or has trailing bytes")

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=image_offset).reshape(count, rows * cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=label_offset).astype(np.int64)

    logger.info(f"Loaded {count} images of {rows}x{cols} pixels from {images_path.name}")
    return Dataset(features=pixels.astype(np.float32) / 255.0, labels=labels, class_count=max(int(labels.max()) + 1, 2))


def split_train_test(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """
    Hold out a stratified test set for the server. Stratification is dropped (with a warning)
    when some class is too small to be split.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("The test fraction must lie strictly between 0 and 1")

    indices = np.arange(len(dataset))
    _, class_sizes = np.unique(dataset.labels, return_counts=True)
    stratify = dataset.labels if class_sizes.min() >= 2 else None
    if stratify is None:
        logger.warning("Some class has fewer than two samples, so the test split is not stratified")

    train_indices, test_indices = train_test_split(
        indices, test_size=test_fraction, random_state=seed, shuffle=True, stratify=stratify
    )
    return dataset.subset(np.sort(train_indices)), dataset.subset(np.sort(test_indices))
