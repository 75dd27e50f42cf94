"""Dataset sources and the non-IID label-shard partitioner."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, PartitionError, UsageError
from .nn import Batch

logger = logging.getLogger(__name__)

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR10_CLASSES = 10


@dataclass(eq=False)
class DatasetSource:
    kind: str
    num_classes: int
    train: Batch
    test: Batch

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.train.inputs.shape[1:])


@dataclass(eq=False)
class UserSplit:
    """One user's exclusive train/validation data plus its label-restricted test set."""

    labels: tuple[int, ...]
    train: Batch
    validation: Batch
    test: Batch
    train_indices: np.ndarray
    validation_indices: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.train)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR10_RECORD:
        raise DataFormatError(
            f"{path}: size {raw.size} is not a multiple of the {CIFAR10_RECORD}-byte record"
        )
    records = raw.reshape(-1, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR10_CLASSES:
        bad = int(np.argmax(labels >= CIFAR10_CLASSES))
        raise DataFormatError(f"{path}: record {bad} has label byte {labels[bad]}")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return pixels, labels


def load_cifar10(dir_path: str | Path) -> DatasetSource:
    """Read the CIFAR-10 binary distribution (``data_batch_{1..5}.bin``, ``test_batch.bin``).

    Pixels are scaled to [0, 1] and then standardized per channel with the
    mean/std of the training split.
    """
    root = Path(dir_path)
    parts = [_read_cifar_file(root / name) for name in CIFAR10_TRAIN_FILES]
    x_train = np.concatenate([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = _read_cifar_file(root / CIFAR10_TEST_FILE)
    mean = x_train.mean(axis=(0, 2, 3), keepdims=True)
    std = x_train.std(axis=(0, 2, 3), keepdims=True)
    std[std == 0] = 1.0
    x_train = (x_train - mean) / std
    x_test = (x_test - mean) / std
    logger.info("loaded CIFAR-10: %d train / %d test", len(y_train), len(y_test))
    return DatasetSource(
        "cifar10_binary", CIFAR10_CLASSES, Batch(x_train, y_train), Batch(x_test, y_test)
    )


def make_synthetic(
    num_classes: int,
    dim: int,
    per_class_train: int,
    per_class_test: int,
    cluster_sep: float,
    rng: np.random.Generator,
) -> DatasetSource:
    """Isotropic unit-variance Gaussian clusters, one per class.

    Class means sit at ``cluster_sep / sqrt(2)`` along randomly rotated
    orthonormal directions, so every pair of means is exactly ``cluster_sep``
    apart. Samples are stored in class order.
    """
    if min(num_classes, dim, per_class_train, per_class_test) < 1:
        raise ConfigurationError("synthetic dataset counts must all be >= 1")
    if cluster_sep <= 0:
        raise ConfigurationError(f"cluster_sep must be > 0, got {cluster_sep}")
    if dim < num_classes:
        raise ConfigurationError(f"dim ({dim}) must be >= num_classes ({num_classes})")
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    means = q[:, :num_classes].T * (cluster_sep / np.sqrt(2.0))

    def draw(per_class: int) -> Batch:
        labels = np.repeat(np.arange(num_classes), per_class)
        x = means[labels] + rng.standard_normal((labels.size, dim))
        return Batch(x, labels)

    train = draw(per_class_train)
    test = draw(per_class_test)
    return DatasetSource("synthetic", num_classes, train, test)


def even_split(total: int, parts: int) -> list[int]:
    """``total`` items over ``parts`` buckets, larger buckets first: 100/3 -> 34, 33, 33."""
    q, r = divmod(total, parts)
    return [q + 1 if i < r else q for i in range(parts)]


def partition(
    source: DatasetSource,
    num_users: int,
    labels_per_user: int,
    shard_size: int,
    val_fraction: float,
    rng: np.random.Generator,
) -> list[UserSplit]:
    """Give each user an exclusive label-sorted shard of ``shard_size`` training samples.

    Each user draws ``labels_per_user`` distinct labels; different users may
    share labels but never samples. The shard is split evenly over the
    user's labels and ``round(val_fraction * shard_size)`` of it (also split evenly
    over labels) is held out as validation data. The user's test set is
    every test sample carrying one of its labels.
    """
    if num_users < 1 or shard_size < 1:
        raise UsageError("need num_users >= 1 and shard_size >= 1")
    if not 1 <= labels_per_user <= source.num_classes:
        raise UsageError(
            f"labels_per_user must be in [1, {source.num_classes}], got {labels_per_user}"
        )
    if not 0.0 < val_fraction < 1.0:
        raise UsageError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    train_size = len(source.train)
    if num_users * shard_size > train_size:
        raise PartitionError(f"{num_users} users x {shard_size} samples exceeds {train_size} train samples")
    n_val = max(1, round(val_fraction * shard_size))
    if n_val >= shard_size:
        raise PartitionError(f"shard_size={shard_size} leaves no training data after {n_val} validation samples")

    y = source.train.labels
    pools = []
    for label in range(source.num_classes):
        idx = np.flatnonzero(y == label)
        pools.append(idx[rng.permutation(idx.size)])
    cursor = [0] * source.num_classes
    test_by_label = [np.flatnonzero(source.test.labels == c) for c in range(source.num_classes)]

    users = []
    for k in range(num_users):
        labels = tuple(sorted(int(c) for c in rng.choice(source.num_classes, labels_per_user, replace=False)))
        shard_counts = even_split(shard_size, labels_per_user)
        val_counts = even_split(n_val, labels_per_user)
        train_idx, val_idx = [], []
        for label, count, v in zip(labels, shard_counts, val_counts):
            start = cursor[label]
            if start + count > pools[label].size:
                raise PartitionError(
                    f"user {k}: label {label} has {pools[label].size - start} unused samples, needs {count}"
                )
            shard = pools[label][start : start + count]
            cursor[label] = start + count
            v = min(v, count - 1) if count > 1 else 0
            train_idx.append(shard[: count - v])
            val_idx.append(shard[count - v :])
        train_idx = np.concatenate(train_idx)
        val_idx = np.concatenate(val_idx)
        if val_idx.size == 0:
            raise PartitionError(f"user {k}: validation split is empty; raise shard_size or val_fraction")
        test_idx = np.concatenate([test_by_label[c] for c in labels])
        users.append(
            UserSplit(
                labels=labels,
                train=source.train.subset(train_idx),
                validation=source.train.subset(val_idx),
                test=source.test.subset(test_idx),
                train_indices=train_idx,
                validation_indices=val_idx,
            )
        )
    return users
