"""Dataset loading, normalization, partitioning helpers and synthetic data.

Supported sources:
  * CIFAR-10 python/binary batches (label byte + 3072 channel-major bytes).
  * BloodMNIST-style .npz archives (train/val/test images+labels, uint8 HWC).
  * Synthetic class-conditional Gaussian blobs for fast deterministic tests.

All arrays are converted to float32 CHW tensors and normalized with
statistics computed on the training split only.
"""

import os
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .rng import derive_seed, generator

CIFAR_RECORD_BYTES = 3073
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch"


class DataError(ValueError):
    """Raised when an on-disk dataset fails validation."""


@dataclass
class NormStats:
    """Per-channel mean/std used to normalize images.

    mean/std have shape [C]. value_range is the (min, max) of the
    normalized training images; the attacker uses it as clamp bounds.
    """

    mean: torch.Tensor
    std: torch.Tensor
    value_range: tuple = (0.0, 1.0)

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        m = self.mean.view(1, -1, 1, 1)
        s = self.std.view(1, -1, 1, 1)
        return (images - m) / s

    def denormalize(self, images: torch.Tensor) -> torch.Tensor:
        m = self.mean.view(1, -1, 1, 1)
        s = self.std.view(1, -1, 1, 1)
        return images * s + m


@dataclass
class DatasetSplit:
    """One split of a dataset, already normalized.

    images: float32 [N, C, H, W]; labels: int64 [N].
    """

    name: str
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    stats: NormStats = field(default=None)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise DataError("labels must be [N] aligned with images")
        if len(self.labels) and (
            int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes
        ):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "DatasetSplit":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return DatasetSplit(
            name=self.name,
            images=self.images[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            stats=self.stats,
        )


def _normalize_uint8(train_u8: np.ndarray, others: list) -> tuple:
    """Scale uint8 HWC/CHW stacks to [0,1], normalize with train-split stats."""
    train = torch.from_numpy(train_u8).float() / 255.0
    rest = [torch.from_numpy(a).float() / 255.0 for a in others]
    mean = train.mean(dim=(0, 2, 3))
    std = train.std(dim=(0, 2, 3))
    std = torch.clamp(std, min=1e-8)
    stats = NormStats(mean=mean, std=std)
    train_n = stats.normalize(train)
    stats.value_range = (float(train_n.min()), float(train_n.max()))
    return stats, train_n, [stats.normalize(r) for r in rest]


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------

def _read_cifar_file(path: str, md5: str = None) -> tuple:
    if not os.path.isfile(path):
        raise DataError(f"missing CIFAR file: {path}")
    raw = open(path, "rb").read()
    if len(raw) != CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE:
        raise DataError(
            f"{path}: expected {CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE} bytes, "
            f"got {len(raw)}"
        )
    if md5 is not None:
        actual = hashlib.md5(raw).hexdigest()
        if actual != md5:
            raise DataError(f"{path}: md5 mismatch (expected {md5}, got {actual})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label byte out of range 0..9")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).copy()  # channel-major record
    return images, labels


def load_cifar10(root: str, checksums: dict = None) -> dict:
    """Load CIFAR-10 binary batches from a directory.

    checksums, if given, maps file name to expected md5 hex digest.
    Returns {'train': DatasetSplit, 'test': DatasetSplit}.
    """
    checksums = checksums or {}
    train_imgs, train_labels = [], []
    for name in CIFAR_TRAIN_FILES:
        imgs, labels = _read_cifar_file(os.path.join(root, name), checksums.get(name))
        train_imgs.append(imgs)
        train_labels.append(labels)
    test_imgs, test_labels = _read_cifar_file(
        os.path.join(root, CIFAR_TEST_FILE), checksums.get(CIFAR_TEST_FILE)
    )
    train_u8 = np.concatenate(train_imgs)
    stats, train_n, (test_n,) = _normalize_uint8(train_u8, [test_imgs])
    train = DatasetSplit(
        "train", train_n, torch.from_numpy(np.concatenate(train_labels)), 10, stats
    )
    test = DatasetSplit("test", test_n, torch.from_numpy(test_labels.copy()), 10, stats)
    return {"train": train, "test": test}


# ---------------------------------------------------------------------------
# BloodMNIST-style npz
# ---------------------------------------------------------------------------

_NPZ_KEYS = [
    "train_images", "train_labels",
    "val_images", "val_labels",
    "test_images", "test_labels",
]


def load_bloodmnist(path: str, merge_val_into_train: bool = False) -> dict:
    """Load a BloodMNIST-style npz (uint8 [N,28,28,3] images, integer labels).

    Returns train/val/test splits; the experiment pipeline uses train/test
    only by default, but the validation split is exposed here.
    """
    if not os.path.isfile(path):
        raise DataError(f"missing npz file: {path}")
    with np.load(path) as z:
        missing = [k for k in _NPZ_KEYS if k not in z.files]
        if missing:
            raise DataError(f"{path}: missing keys {missing}")
        arrays = {k: z[k] for k in _NPZ_KEYS}
    for split in ("train", "val", "test"):
        imgs = arrays[f"{split}_images"]
        if imgs.ndim != 4 or imgs.shape[1:] != (28, 28, 3) or imgs.dtype != np.uint8:
            raise DataError(
                f"{path}: {split}_images must be uint8 [N,28,28,3], "
                f"got {imgs.dtype} {imgs.shape}"
            )
    def _labels(key):
        lab = arrays[key].reshape(-1).astype(np.int64)
        return lab

    train_u8 = arrays["train_images"].transpose(0, 3, 1, 2)
    val_u8 = arrays["val_images"].transpose(0, 3, 1, 2)
    test_u8 = arrays["test_images"].transpose(0, 3, 1, 2)
    train_lab = _labels("train_labels")
    val_lab = _labels("val_labels")
    test_lab = _labels("test_labels")
    if merge_val_into_train:
        train_u8 = np.concatenate([train_u8, val_u8])
        train_lab = np.concatenate([train_lab, val_lab])
        val_u8 = val_u8[:0]
        val_lab = val_lab[:0]

    num_classes = int(max(train_lab.max(), test_lab.max())) + 1
    others = [test_u8] + ([] if merge_val_into_train else [val_u8])
    stats, train_n, rest = _normalize_uint8(train_u8, others)
    out = {
        "train": DatasetSplit("train", train_n, torch.from_numpy(train_lab), num_classes, stats),
        "test": DatasetSplit("test", rest[0], torch.from_numpy(test_lab), num_classes, stats),
    }
    if not merge_val_into_train:
        out["val"] = DatasetSplit("val", rest[1], torch.from_numpy(val_lab), num_classes, stats)
    return out


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def make_synthetic(
    n: int,
    image_shape: tuple = (3, 16, 16),
    num_classes: int = 8,
    seed: int = 0,
    name: str = "train",
    stats: NormStats = None,
) -> DatasetSplit:
    """Class-conditional Gaussian blobs: one smooth template per class plus noise.

    Labels are balanced (class counts differ by at most 1). Templates depend
    only on (seed, num_classes, image_shape); per-sample noise is drawn from
    a separate stream so two splits with the same seed share templates.
    """
    c, h, w = image_shape
    if min(n, c, h, w) < 1:
        raise DataError("all synthetic dimensions must be >= 1")
    if num_classes < 2:
        raise DataError("synthetic data needs num_classes >= 2")
    if num_classes > n:
        raise DataError(f"num_classes={num_classes} exceeds sample count {n}")
    tgen = generator(derive_seed("synthetic-templates", seed, num_classes, image_shape))
    # Smooth low-frequency templates: upsample 4x4 noise to full resolution.
    base = torch.randn(num_classes, c, 4, 4, generator=tgen)
    templates = torch.nn.functional.interpolate(
        base, size=(h, w), mode="bilinear", align_corners=False
    )

    labels = torch.arange(n, dtype=torch.long) % num_classes
    pgen = generator(derive_seed("synthetic-perm", seed, name, n))
    labels = labels[torch.randperm(n, generator=pgen)]
    ngen = generator(derive_seed("synthetic-noise", seed, name, n))
    noise = 0.35 * torch.randn(n, c, h, w, generator=ngen)
    raw = templates[labels] + noise

    if stats is None:
        mean = raw.mean(dim=(0, 2, 3))
        std = torch.clamp(raw.std(dim=(0, 2, 3)), min=1e-8)
        stats = NormStats(mean=mean, std=std)
        images = stats.normalize(raw)
        stats.value_range = (float(images.min()), float(images.max()))
    else:
        images = stats.normalize(raw)
    return DatasetSplit(name, images, labels, num_classes, stats)


def make_synthetic_splits(
    n_train: int,
    n_test: int,
    image_shape: tuple = (3, 16, 16),
    num_classes: int = 8,
    seed: int = 0,
) -> dict:
    """Train/test synthetic splits sharing templates and train-split stats."""
    train = make_synthetic(n_train, image_shape, num_classes, seed, name="train")
    test = make_synthetic(
        n_test, image_shape, num_classes, seed, name="test", stats=train.stats
    )
    return {"train": train, "test": test}


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def batch_iter(split: DatasetSplit, batch_size: int, seed: int, shuffle: bool = True,
               epoch: int = 0):
    """Yield (images, labels) batches; order is a pure function of (seed, epoch)."""
    n = len(split)
    if not 1 <= batch_size <= n:
        raise DataError(f"batch_size must be in [1, {n}], got {batch_size}")
    if shuffle:
        g = generator(derive_seed("batch-order", seed, epoch))
        order = torch.randperm(n, generator=g)
    else:
        order = torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield split.images[idx], split.labels[idx]


def subsample_split(split: DatasetSplit, n: int, seed: int) -> DatasetSplit:
    """Deterministic uniform subsample without replacement."""
    n = min(n, len(split))
    g = generator(derive_seed("subsample", seed, split.name, n))
    idx = torch.randperm(len(split), generator=g)[:n]
    return split.subset(idx)
