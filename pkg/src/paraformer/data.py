"""Dataset ingestion and deterministic splits.

CIFAR-10 binary records are 3073 bytes: one label byte, then 1024 red,
1024 green and 1024 blue bytes, each plane row-major over the 32x32 image.
Pixel bytes are kept exact; :meth:`Dataset.batch` converts to floats as
``(x / 255 - mean[c]) / std[c]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigError

RECORD = 3073
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at byte offset {offset}" if offset is not None else ""
        src = f" in {path}" if path else ""
        super().__init__(f"{message}{where}{src}")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] uint8
    labels: np.ndarray  # [N] int64
    class_names: tuple[str, ...]
    provenance: str
    pools: dict[str, np.ndarray] = field(default_factory=dict)
    mean: tuple[float, ...] = CIFAR10_MEAN
    std: tuple[float, ...] = CIFAR10_STD

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) >= len(self.class_names):
            raise DataFormatError(f"label {int(self.labels.max())} >= class count {len(self.class_names)}")
        if not self.pools:
            self.pools = {"train": np.arange(len(self.labels))}

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def batch(self, indices, dtype=np.float32) -> np.ndarray:
        x = self.images[np.asarray(indices, dtype=np.int64)].astype(dtype) / dtype(255.0)
        mean = np.asarray(self.mean, dtype=dtype).reshape(1, -1, 1, 1)
        std = np.asarray(self.std, dtype=dtype).reshape(1, -1, 1, 1)
        return (x - mean) / std


def parse_cifar10(raw: bytes, path=None) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % RECORD:
        start = len(raw) - len(raw) % RECORD
        raise DataFormatError(f"truncated record: {len(raw) % RECORD} of {RECORD} bytes", start, path)
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"label byte {labels[i]} >= 10 in record {i}", i * RECORD, path)
    images = recs[:, 1:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    return parse_cifar10(Path(path).read_bytes(), path)


def load_cifar10(path) -> Dataset:
    """Read a single batch file, or a directory of ``data_batch_*.bin`` / ``test_batch.bin``.

    A directory yields pools ``train`` (all present data batches, in file
    order) and ``test``.  A single file becomes one pool, named ``test``
    when the file is ``test_batch.bin`` and ``train`` otherwise.
    """
    path = Path(path)
    if path.is_file():
        images, labels = read_cifar10_file(path)
        pool = "test" if path.name == CIFAR10_TEST_FILE else "train"
        return Dataset(images, labels, CIFAR10_CLASSES, "cifar10", {pool: np.arange(len(labels))})
    if not path.is_dir():
        raise FileNotFoundError(f"no CIFAR-10 data at {path}")
    parts, pools, n = [], {}, 0
    train_files = [path / f for f in CIFAR10_TRAIN_FILES if (path / f).exists()]
    test_file = path / CIFAR10_TEST_FILE
    if not train_files and not test_file.exists():
        raise FileNotFoundError(f"{path} holds no CIFAR-10 binary batch files")
    for name, files in (("train", train_files), ("test", [test_file] if test_file.exists() else [])):
        start = n
        for f in files:
            parts.append(read_cifar10_file(f))
            n += len(parts[-1][1])
        if files:
            pools[name] = np.arange(start, n)
    images = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, 3, 32, 32), np.uint8)
    labels = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int64)
    return Dataset(images, labels, CIFAR10_CLASSES, "cifar10", pools)


def load_image_folder(path, size: int = 32, provenance: str = "folder") -> Dataset:
    """Best-effort loader for ``<root>/<split>/<class>/<image>`` trees.

    ``<split>`` directories named ``train`` and ``test`` become pools; if
    neither exists, ``<root>/<class>/<image>`` is read as one ``train`` pool.
    Images are converted to RGB and resized to ``size`` x ``size``.
    """
    from PIL import Image

    root = Path(path)
    splits = [s for s in ("train", "test") if (root / s).is_dir()] or [""]
    class_names = sorted({c.name for s in splits for c in (root / s).iterdir() if c.is_dir()})
    if not class_names:
        raise FileNotFoundError(f"no class directories under {root}")
    lookup = {c: i for i, c in enumerate(class_names)}
    images, labels, pools, n = [], [], {}, 0
    for s in splits:
        start = n
        for cname in class_names:
            cdir = root / s / cname
            if not cdir.is_dir():
                continue
            for f in sorted(cdir.iterdir()):
                if not f.is_file():
                    continue
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB").resize((size, size)), dtype=np.uint8)
                images.append(arr.transpose(2, 0, 1))
                labels.append(lookup[cname])
                n += 1
        pools[s or "train"] = np.arange(start, n)
    imgs = np.stack(images) if images else np.zeros((0, 3, size, size), np.uint8)
    mean = tuple(float(v) for v in (imgs.reshape(len(imgs), 3, -1).mean(axis=(0, 2)) / 255.0)) if len(imgs) else (0.5,) * 3
    std = tuple(float(v) for v in (imgs.reshape(len(imgs), 3, -1).std(axis=(0, 2)) / 255.0 + 1e-6)) if len(imgs) else (0.25,) * 3
    return Dataset(imgs, np.asarray(labels, dtype=np.int64), tuple(class_names), provenance, pools, mean, std)


def load_dataset(path, fmt: str = "cifar10") -> Dataset:
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"data path {path!r} does not exist")
    if fmt == "cifar10":
        return load_cifar10(path)
    if fmt == "folder":
        return load_image_folder(path)
    raise ConfigError(f"unknown data format {fmt!r}")


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


def make_splits(dataset: Dataset, train_n: int, val_n: int, test_source: str = "test",
                seed: int = 0, test_n: int | None = None, train_source: str = "train") -> Splits:
    """Seeded shuffle of the train pool: first ``train_n`` train, next ``val_n`` val.

    Test indices are the designated test pool in stored order, optionally
    capped at ``test_n``.  Smaller requests are prefixes of the same shuffle.
    """
    pool = dataset.pools.get(train_source)
    if pool is None:
        raise ConfigError(f"dataset has no {train_source!r} pool")
    if train_n < 0 or val_n < 0 or train_n + val_n > len(pool):
        raise ConfigError(f"train_n + val_n = {train_n + val_n} exceeds the {len(pool)}-image train pool")
    order = pool[np.random.default_rng(seed).permutation(len(pool))]
    test = dataset.pools.get(test_source, np.zeros(0, dtype=np.int64))
    if test_n is not None:
        if test_n > len(test):
            raise ConfigError(f"test_n = {test_n} exceeds the {len(test)}-image test pool")
        test = test[:test_n]
    return Splits(order[:train_n].copy(), order[train_n:train_n + val_n].copy(), np.array(test), seed)


def synthetic_dataset(n: int, classes: int = 10, image=(3, 32, 32), seed: int = 0,
                      signal: float = 60.0, test_n: int = 0) -> Dataset:
    """Class-conditional noise images for smoke runs when no real data is present.

    Each class has a fixed random template; samples are template + noise,
    clipped to bytes.  ``signal`` scales how far templates sit from gray.
    """
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((classes,) + tuple(image))
    labels = rng.integers(0, classes, size=n + test_n)
    noise = rng.standard_normal((n + test_n,) + tuple(image))
    pix = 128.0 + signal * templates[labels] + 40.0 * noise
    images = np.clip(np.rint(pix), 0, 255).astype(np.uint8)
    pools = {"train": np.arange(n), "test": np.arange(n, n + test_n)}
    names = tuple(f"class{i}" for i in range(classes))
    return Dataset(images, labels.astype(np.int64), names, "synthetic", pools, (0.5,) * image[0], (0.25,) * image[0])
