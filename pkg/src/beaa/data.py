"""Dataset containers and loaders (CIFAR-10 binary batches, class-per-directory images)."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Normalized images with train/val/test splits.

    ``mean`` and ``std`` are the per-channel constants that were subtracted
    and divided out, computed on the training split.
    """

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std: np.ndarray = field(default_factory=lambda: np.zeros(0))
    class_names: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        for split in ("train", "val", "test"):
            y = getattr(self, f"y_{split}")
            x = getattr(self, f"x_{split}")
            if len(x) != len(y):
                raise DatasetError(f"{split}: {len(x)} images but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise DatasetError(f"{split}: labels outside [0, {self.num_classes})")

    @property
    def image_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def subset(self, n_train=None, n_val=None, n_test=None, seed=0) -> "Dataset":
        """Seeded random subsets of each split (``None`` keeps a split whole)."""
        rng = np.random.default_rng(seed)

        def pick(x, y, k):
            if k is None or k >= len(x):
                return x, y
            idx = np.sort(rng.permutation(len(x))[:k])
            return x[idx], y[idx]

        xtr, ytr = pick(self.x_train, self.y_train, n_train)
        xv, yv = pick(self.x_val, self.y_val, n_val)
        xte, yte = pick(self.x_test, self.y_test, n_test)
        return Dataset(xtr, ytr, xv, yv, xte, yte, self.num_classes, self.mean, self.std,
                       list(self.class_names), self.name)


def normalize(x_train, *others):
    """Per-channel standardization with statistics from ``x_train``."""
    mean = x_train.mean(axis=(0, 2, 3))
    std = x_train.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)

    def f(x):
        return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float64)

    return mean, std, [f(x_train)] + [f(x) for x in others]


def parse_cifar_records(buf: bytes):
    """Split raw CIFAR-10 binary data into uint8 images ``(K, 3, 32, 32)`` and labels."""
    if len(buf) % CIFAR_RECORD:
        raise DatasetError(f"file length {len(buf)} is not a multiple of the "
                           f"{CIFAR_RECORD}-byte record size")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetError("label byte out of range [0, 9]")
    return rec[:, 1:].reshape((-1,) + CIFAR_SHAPE), labels


def _read_cifar_file(path):
    with open(path, "rb") as fh:
        return parse_cifar_records(fh.read())


def load_cifar10(directory, val_count=0, seed=0, normalize_data=True) -> Dataset:
    """Load the CIFAR-10 binary release (``data_batch_1..5.bin`` and ``test_batch.bin``).

    Pixels are scaled to [0, 1] and then, by default, standardized per
    channel.  ``val_count`` training images are held out by seeded shuffle.
    """
    directory = os.fspath(directory)
    names = [n for n in CIFAR_TRAIN_FILES if os.path.exists(os.path.join(directory, n))]
    if not names or not os.path.exists(os.path.join(directory, CIFAR_TEST_FILE)):
        raise DatasetError(f"{directory!r} does not contain the CIFAR-10 binary batches")
    parts = [_read_cifar_file(os.path.join(directory, n)) for n in names]
    x_tr = np.concatenate([p[0] for p in parts]).astype(np.float64) / 255.0
    y_tr = np.concatenate([p[1] for p in parts])
    x_te, y_te = _read_cifar_file(os.path.join(directory, CIFAR_TEST_FILE))
    x_te = x_te.astype(np.float64) / 255.0
    perm = np.random.default_rng(seed).permutation(len(x_tr))
    val_idx, tr_idx = np.sort(perm[:val_count]), np.sort(perm[val_count:])
    x_val, y_val = x_tr[val_idx], y_tr[val_idx]
    x_tr, y_tr = x_tr[tr_idx], y_tr[tr_idx]
    mean, std = np.zeros(3), np.ones(3)
    if normalize_data:
        mean, std, (x_tr, x_val, x_te) = normalize(x_tr, x_val, x_te)
    labels_file = os.path.join(directory, "batches.meta.txt")
    classes = []
    if os.path.exists(labels_file):
        with open(labels_file) as fh:
            classes = [ln.strip() for ln in fh if ln.strip()]
    return Dataset(x_tr, y_tr, x_val, y_val, x_te, y_te, 10, mean, std, classes, "cifar10")


def split_indices(n: int, seed=0, fractions=(0.6, 0.1, 0.3)):
    """Seeded shuffle of ``range(n)`` cut into train/val/test index arrays."""
    perm = np.random.default_rng(seed).permutation(n)
    n_tr = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return np.sort(perm[:n_tr]), np.sort(perm[n_tr:n_tr + n_val]), np.sort(perm[n_tr + n_val:])


def load_image_dir(directory, target_size=(112, 112), seed=0, normalize_data=True) -> Dataset:
    """Class-per-subdirectory image folder resized to ``target_size``, split 60/10/30."""
    from PIL import Image

    directory = os.fspath(directory)
    classes = sorted(d for d in os.listdir(directory) if os.path.isdir(os.path.join(directory, d)))
    if not classes:
        raise DatasetError(f"no class subdirectories in {directory!r}")
    images, labels = [], []
    h, w = target_size
    for label, cls in enumerate(classes):
        cdir = os.path.join(directory, cls)
        files = sorted(f for f in os.listdir(cdir) if f.lower().endswith(IMAGE_EXTENSIONS))
        if not files:
            raise DatasetError(f"class directory {cls!r} has no images")
        for f in files:
            path = os.path.join(cdir, f)
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB").resize((w, h), Image.BILINEAR))
            except OSError as exc:
                raise DatasetError(f"cannot read image {path!r}: {exc}") from None
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    x = np.stack(images).astype(np.float64) / 255.0
    y = np.asarray(labels, dtype=np.int64)
    tr, va, te = split_indices(len(x), seed)
    parts = [x[tr], x[va], x[te]]
    mean, std = np.zeros(3), np.ones(3)
    if normalize_data:
        mean, std, parts = normalize(*parts)
    return Dataset(parts[0], y[tr], parts[1], y[va], parts[2], y[te], len(classes), mean, std,
                   classes, os.path.basename(directory.rstrip(os.sep)))


def synthetic_dataset(n_train=512, n_val=64, n_test=256, num_classes=4, image_shape=(3, 8, 8),
                      noise=1.0, seed=0) -> Dataset:
    """Class-template images plus Gaussian noise, for smoke tests and demos.

    Each class has a fixed random template; samples are template + noise, so
    the task is learnable and harder for larger ``noise``.
    """
    rng = np.random.default_rng(seed)
    templates = rng.normal(0.0, 1.0, size=(num_classes,) + tuple(image_shape))

    def draw(k):
        y = rng.integers(0, num_classes, k)
        x = templates[y] + rng.normal(0.0, noise, size=(k,) + tuple(image_shape))
        return x, y

    (xtr, ytr), (xv, yv), (xte, yte) = draw(n_train), draw(n_val), draw(n_test)
    mean, std, (xtr, xv, xte) = normalize(xtr, xv, xte)
    return Dataset(xtr, ytr, xv, yv, xte, yte, num_classes, mean, std,
                   [f"class{i}" for i in range(num_classes)], "synthetic")


def write_cifar_records(path, images_u8, labels) -> None:
    """Write images/labels in the CIFAR-10 binary record layout."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    if images_u8.shape[1] != CIFAR_RECORD - 1:
        raise DatasetError("images must be 3x32x32")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())
