"""
This is a chunk which includes dataset ingestion and splitting:
MNIST IDX files, CIFAR10 binary batches, the synthetic 3-class toy blobs,
and deterministic per-run partitions.

Labels are stored in {1..c} everywhere; 0 is the reject class.
"""
import math
import struct
from dataclasses import dataclass
from os.path import basename

import numpy as np
from sklearn.datasets import make_blobs

from .errors import ConsistencyError, DataError, FormatError, LengthError, SizeError

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR10_RECORD = 1 + 3072

# Toy blob geometry: an equilateral triangle of side 3 and isotropic spread
# 0.6, so neighbouring classes overlap slightly. Features are mapped from the
# square window below (side 9, centered on the triangle) into [0, 1].
TOY_CENTERS = np.array([[0.0, 0.0], [3.0, 0.0], [1.5, 1.5 * math.sqrt(3.0)]])
TOY_STD = 0.6
TOY_WINDOW_LOW = np.array([-3.0, 1.5 * math.sqrt(3.0) / 2.0 - 4.5])
TOY_WINDOW_SIDE = 9.0


class Dataset:
    """A labelled sample matrix.

    Attributes:
        features (numpy.ndarray): (n, d) float64 values in [0, 1].
        labels (numpy.ndarray): (n,) int64 labels in {1..c}.
        num_classes (int): c.
        shape (tuple): per-sample shape, e.g. (1, 28, 28) or (2,).
    """

    def __init__(self, features, labels, num_classes, shape=None):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2:
            features = features.reshape(len(features), -1)
        if shape is None:
            shape = (features.shape[1],)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != features.shape[1]:
            raise ConsistencyError("sample shape {} does not match {} features"
                                   .format(shape, features.shape[1]))
        if labels.shape != (features.shape[0],):
            raise ConsistencyError("{} labels for {} samples".format(labels.shape[0], features.shape[0]))
        if num_classes < 1:
            raise DataError("num_classes must be positive, got {}".format(num_classes))
        if features.size and (np.any(~np.isfinite(features)) or features.min() < 0.0 or features.max() > 1.0):
            raise DataError("features must lie in [0, 1]")
        if labels.size and (labels.min() < 1 or labels.max() > num_classes):
            raise DataError("labels must lie in 1..{}".format(num_classes))
        self.features = features
        self.labels = labels
        self.num_classes = int(num_classes)
        self.shape = shape

    def __len__(self):
        return self.features.shape[0]

    def images(self):
        """Features reshaped to the batch-first network input layout."""
        return self.features.reshape((len(self),) + self.shape)

    def subset(self, index):
        """Rows selected by an index array, keeping the class count."""
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index], self.num_classes, self.shape)


@dataclass(frozen=True)
class SplitSpec:
    """Sizes and seed of one run's partition.

    pretrain_size is carved once per seed (independently of run_index) so the
    network pretraining block stays disjoint from every run; train, test and
    validation are then drawn per (seed, run_index) from the remaining pool.
    """
    train_size: int
    test_size: int
    seed: int = 0
    run_index: int = 0
    val_size: int = 0
    pretrain_size: int = 0

    def __post_init__(self):
        for name in ('train_size', 'test_size', 'val_size', 'pretrain_size'):
            if getattr(self, name) < 0:
                raise ValueError("{} must be non-negative".format(name))
        if not 0 <= self.run_index < 5:
            raise ValueError("run_index must lie in [0, 5), got {}".format(self.run_index))


def _read_be32(buffer, offset, path):
    if len(buffer) < offset + 4:
        raise LengthError("{}: header truncated".format(path))
    return struct.unpack('>I', buffer[offset:offset + 4])[0]


def _read_idx(path, magic, n_dims):
    with open(path, 'rb') as f:
        buffer = f.read()
    found = _read_be32(buffer, 0, path)
    if found != magic:
        raise FormatError("{}: magic 0x{:08x}, expected 0x{:08x}".format(path, found, magic), path=path)
    dims = [_read_be32(buffer, 4 + 4 * i, path) for i in range(n_dims)]
    header = 4 + 4 * n_dims
    expected = int(np.prod(dims))
    if len(buffer) - header < expected:
        raise LengthError("{}: payload has {} bytes, header announces {}"
                          .format(path, len(buffer) - header, expected))
    payload = np.frombuffer(buffer, dtype=np.uint8, count=expected, offset=header)
    return payload.reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """Load an MNIST image/label IDX pair.

    Args:
        images_path (str): idx3 images file (magic 0x00000803).
        labels_path (str): idx1 labels file (magic 0x00000801).

    Returns:
        Dataset: features = pixel / 255, labels remapped 0..9 -> 1..10.
    """
    images = _read_idx(images_path, MNIST_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, MNIST_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError("{} has {} images but {} has {} labels"
                               .format(basename(images_path), images.shape[0],
                                       basename(labels_path), labels.shape[0]))
    if labels.size and labels.max() > 9:
        raise FormatError("{}: label byte {} outside 0..9".format(labels_path, labels.max()), path=labels_path)
    n, rows, cols = images.shape
    features = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64) + 1, 10, (1, rows, cols))


def load_cifar10_binary(paths):
    """Load one or more CIFAR10 binary batch files.

    Args:
        paths (str or list of str): data_batch_*.bin / test_batch.bin files.

    Returns:
        Dataset: (3, 32, 32) samples in [0, 1], labels 1..10.
    """
    if isinstance(paths, str):
        paths = [paths]
    features, labels = [], []
    for path in paths:
        with open(path, 'rb') as f:
            buffer = f.read()
        if len(buffer) % CIFAR10_RECORD != 0:
            raise LengthError("{}: {} bytes is not a whole number of {}-byte records"
                              .format(path, len(buffer), CIFAR10_RECORD))
        records = np.frombuffer(buffer, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
        if records.size and records[:, 0].max() > 9:
            raise FormatError("{}: label byte outside 0..9".format(path), path=path)
        labels.append(records[:, 0].astype(np.int64) + 1)
        features.append(records[:, 1:].astype(np.float64) / 255.0)
    return Dataset(np.concatenate(features), np.concatenate(labels), 10, (3, 32, 32))


def make_toy_blobs(n_per_class, seed):
    """Draw the 3-class bi-dimensional toy problem.

    Centers are TOY_CENTERS (triangle of side 3), spread TOY_STD; points are
    mapped through the fixed window of side TOY_WINDOW_SIDE into [0, 1] and
    clipped (clipping only affects points beyond 5 standard deviations).

    Args:
        n_per_class (int): samples per class, >= 1.
        seed (int): random seed.

    Returns:
        Dataset: 3 classes, shape (2,).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1, got {}".format(n_per_class))
    x, y = make_blobs(n_samples=[n_per_class] * 3, centers=TOY_CENTERS,
                      cluster_std=TOY_STD, random_state=seed)
    features = np.clip((x - TOY_WINDOW_LOW) / TOY_WINDOW_SIDE, 0.0, 1.0)
    return Dataset(features, y + 1, 3, (2,))


def toy_centers_scaled():
    """TOY_CENTERS in the [0, 1] feature coordinates."""
    return (TOY_CENTERS - TOY_WINDOW_LOW) / TOY_WINDOW_SIDE


def _partition(n, spec):
    """Index blocks of one run: pretrain, train, test, val."""
    needed = spec.pretrain_size + spec.train_size + spec.test_size + spec.val_size
    if needed > n:
        raise SizeError("split needs {} samples, dataset has {}".format(needed, n))
    base = np.random.default_rng([spec.seed, 0x5EED]).permutation(n)
    pretrain = base[:spec.pretrain_size]
    pool = np.sort(base[spec.pretrain_size:])
    pool = pool[np.random.default_rng([spec.seed, spec.run_index]).permutation(len(pool))]
    a = spec.train_size
    b = a + spec.test_size
    c = b + spec.val_size
    return {'pretrain': pretrain, 'train': pool[:a], 'test': pool[a:b], 'val': pool[b:c]}


def split(dataset, spec):
    """Draw the disjoint train and test sets of one run.

    Args:
        dataset (Dataset): the full dataset.
        spec (SplitSpec): sizes, seed and run index.

    Returns:
        (Dataset, Dataset): train, test.
    """
    blocks = _partition(len(dataset), spec)
    return dataset.subset(blocks['train']), dataset.subset(blocks['test'])


def validation_subset(dataset, spec):
    """Clean calibration set of one run, disjoint from its train and test."""
    return dataset.subset(_partition(len(dataset), spec)['val'])


def pretrain_subset(dataset, spec):
    """Network pretraining block; identical for every run of a seed."""
    return dataset.subset(_partition(len(dataset), spec)['pretrain'])


def split_indices(n, spec):
    """Raw index blocks, exposed for manifests and tests."""
    return _partition(n, spec)
