"""
Datasets: synthetic desk-scale problems and MNIST IDX files.
"""
import gzip
import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from cramkit import variables
from cramkit.errors import ContractError, FormatError, InputError

__all__ = [
    'PROVENANCES',
    'Dataset',
    'make_synthetic',
    'load_mnist_idx',
    'balanced_sample',
]

PROVENANCES = ('synthetic_gaussian_mixture', 'synthetic_two_spirals', 'mnist_idx')
SPLITS = ('train', 'test', 'calibration')


def balanced_sample(labels, candidates, size, rng):
    """
    Draws ``size`` indices from ``candidates`` spreading them over classes
    as evenly as the class sizes allow.

    Returns:
        numpy.ndarray: Sorted sample of indices
    """
    candidates = np.asarray(candidates)
    if size > candidates.size:
        raise ContractError('cannot draw {} samples from {} candidates'.format(size, candidates.size))
    pools = [list(rng.permutation(candidates[labels[candidates] == c])) for c in np.unique(labels[candidates])]
    chosen = []
    while len(chosen) < size:
        for pool in pools:
            if pool and len(chosen) < size:
                chosen.append(pool.pop())
    return np.sort(np.array(chosen, dtype=np.int64))


@dataclass
class Dataset:
    """
    Features, labels and the split each sample belongs to.

    Attributes:
        features (numpy.ndarray): ``(N, D)`` float64
        labels (numpy.ndarray): ``(N,)`` int64 in ``[0, num_classes)``
        num_classes (int): Number of classes
        split_tags (dict): ``train``/``test``/``calibration`` -> index arrays;
            calibration is a subset of train
        provenance (str): Where the data came from
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_tags: dict = field(default_factory=dict)
    provenance: str = 'synthetic_gaussian_mixture'

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InputError('features {} and labels {} do not line up'.format(
                self.features.shape, self.labels.shape))
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise InputError('labels must lie in [0, {})'.format(self.num_classes))
        if self.provenance not in PROVENANCES:
            raise InputError('unknown provenance {!r}'.format(self.provenance))
        train = set(self.split_tags.get('train', ()))
        if train & set(self.split_tags.get('test', ())):
            raise InputError('train and test splits overlap')
        if not set(self.split_tags.get('calibration', ())) <= train:
            raise InputError('calibration samples must come from the train split')

    @property
    def dim(self):
        return self.features.shape[1]

    def indices(self, split):
        if split not in SPLITS:
            raise InputError('unknown split {!r}'.format(split))
        return np.asarray(self.split_tags.get(split, ()), dtype=np.int64)

    def arrays(self, split):
        idx = self.indices(split)
        return self.features[idx], self.labels[idx]

    def size(self, split):
        return int(self.indices(split).size)

    def calibration_sample(self, size, rng):
        """
        Fresh class-balanced calibration indices drawn from the train split.
        """
        return balanced_sample(self.labels, self.indices('train'), size, rng)

    def fingerprint(self):
        digest = hashlib.sha256()
        digest.update(self.features.tobytes())
        digest.update(self.labels.tobytes())
        for split in SPLITS:
            digest.update(self.indices(split).tobytes())
        return digest.hexdigest()[:16]


def _split(labels, test_fraction, calibration_size, rng):
    n = labels.size
    order = rng.permutation(n)
    n_test = int(math.floor(test_fraction * n + 0.5))
    test = np.sort(order[:n_test])
    train = np.sort(order[n_test:])
    calibration = balanced_sample(labels, train, min(calibration_size, train.size), rng)
    return {'train': train, 'test': test, 'calibration': calibration}


def _gaussian_mixture(labels, num_classes, dim, noise, rng):
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = 4.0 * np.cos(angles)
    centers[:, 1] = 4.0 * np.sin(angles)
    return centers[labels] + noise * rng.normal(size=(labels.size, dim))


def _two_spirals(labels, num_classes, dim, noise, rng):
    t = rng.uniform(0.05, 1.0, size=labels.size)
    angle = 3.0 * np.pi * t + 2.0 * np.pi * labels / num_classes
    features = np.zeros((labels.size, dim))
    features[:, 0] = 4.0 * t * np.cos(angle)
    features[:, 1] = 4.0 * t * np.sin(angle)
    return features + noise * rng.normal(size=(labels.size, dim))


def make_synthetic(kind, n, num_classes, noise, seed, dim=2, test_fraction=0.2,
                   calibration_size=variables.DEFAULT_CALIBRATION_SIZE):
    """
    Deterministic synthetic classification data.

    Args:
        kind (str): ``gaussian_mixture`` (class centers on a circle of
            radius 4) or ``two_spirals`` (interleaved spiral arms)
        n (int): Number of samples, at least ``10 * num_classes``
        num_classes (int): Number of classes, balanced within one sample
        noise (float): Standard deviation of the additive Gaussian noise
        seed (int): Generator seed
        dim (int): Feature dimension, at least 2; extra dimensions carry
            noise only

    Returns:
        Dataset: Data with train/test/calibration splits
    """
    if kind not in ('gaussian_mixture', 'two_spirals'):
        raise InputError('unknown synthetic kind {!r}'.format(kind))
    if num_classes < 2 or n < 10 * num_classes:
        raise ContractError('need at least 10 samples per class, got n={} for {} classes'.format(n, num_classes))
    if dim < 2:
        raise ContractError('synthetic data needs at least 2 dimensions')
    if noise < 0:
        raise ContractError('noise must be non-negative')
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    if kind == 'gaussian_mixture':
        features = _gaussian_mixture(labels, num_classes, dim, noise, rng)
    else:
        features = _two_spirals(labels, num_classes, dim, noise, rng)
    splits = _split(labels, test_fraction, calibration_size, rng)
    return Dataset(features, labels, num_classes, splits, 'synthetic_' + kind)


def _read_bytes(path):
    opener = gzip.open if str(path).endswith('.gz') else open
    with opener(path, 'rb') as f:
        return f.read()


def _read_header(buf, fields, magic, what):
    size = 4 * fields
    if len(buf) < size:
        raise FormatError('{} header truncated'.format(what), offset=len(buf))
    values = struct.unpack('>' + 'I' * fields, buf[:size])
    if values[0] != magic:
        raise FormatError('{} magic 0x{:08x}, expected 0x{:08x}'.format(what, values[0], magic), offset=0)
    return values[1:]


def load_mnist_idx(images_path, labels_path, test_fraction=0.2, seed=0,
                   calibration_size=variables.DEFAULT_CALIBRATION_SIZE, limit=None):
    """
    Reads an IDX image file and its label file (optionally gzipped).

    Pixels are scaled to [0, 1] and flattened to ``rows * cols`` features.

    Args:
        images_path (str): IDX3 file, magic 0x00000803
        labels_path (str): IDX1 file, magic 0x00000801
        test_fraction (float): Share of samples held out for testing
        seed (int): Split seed
        limit (int, optional): Keep only the first ``limit`` samples

    Returns:
        Dataset: MNIST data with train/test/calibration splits
    """
    images = _read_bytes(images_path)
    count, rows, cols = _read_header(images, 4, variables.IDX_IMAGES_MAGIC, 'image file')
    pixels = count * rows * cols
    if len(images) < 16 + pixels:
        raise FormatError('image file truncated: {} images of {}x{} need {} bytes'.format(
            count, rows, cols, 16 + pixels), offset=len(images))
    labels_buf = _read_bytes(labels_path)
    (label_count,) = _read_header(labels_buf, 2, variables.IDX_LABELS_MAGIC, 'label file')
    if label_count != count:
        raise FormatError('{} labels for {} images'.format(label_count, count), offset=4)
    if len(labels_buf) < 8 + label_count:
        raise FormatError('label file truncated', offset=len(labels_buf))
    features = np.frombuffer(images, dtype=np.uint8, count=pixels, offset=16)
    features = features.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(labels_buf, dtype=np.uint8, count=label_count, offset=8).astype(np.int64)
    if limit is not None:
        features, labels = features[:limit], labels[:limit]
    num_classes = max(10, int(labels.max()) + 1) if labels.size else 10
    rng = np.random.default_rng(seed)
    splits = _split(labels, test_fraction, calibration_size, rng)
    return Dataset(features, labels, num_classes, splits, 'mnist_idx')
