import os
import gzip
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
import torch

from .utils.log import logger
from .utils.rng import generator_from

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_RECORD = 3073
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class IDXFormatError(ValueError):
    pass


@dataclass(repr=False, eq=False)
class Dataset:
    images: torch.Tensor
    labels: torch.Tensor
    split: str
    num_classes: int
    mean: Tuple[float, ...] = (0.0,)
    std: Tuple[float, ...] = (1.0,)
    centers: Optional[torch.Tensor] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if not torch.isfinite(self.images).all():
            raise ValueError("non-finite image values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        if n <= 0 or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes, self.mean, self.std)

    def flatten(self) -> "Dataset":
        return Dataset(
            self.images.reshape(len(self), -1), self.labels, self.split, self.num_classes, self.mean, self.std
        )

    def __repr__(self) -> str:
        return f"Dataset({self.split}, n={len(self)}, shape={self.sample_shape}, classes={self.num_classes})"


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IDXFormatError(f"{path}: wrong magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IDXFormatError(f"{path}: truncated payload, {len(raw) - header} of {size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(
    images_path: str,
    labels_path: str,
    split: str = "train",
    mean: float = 0.1307,
    std: float = 0.3081,
) -> Dataset:
    """
    Parse a pair of MNIST IDX files (plain or .gz). Pixels are scaled to
    [0, 1] and standardized with `mean` and `std`; images keep their (N, 1,
    H, W) layout.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise IDXFormatError(
            f"count mismatch: {len(images)} images in {images_path}, {len(labels)} labels in {labels_path}"
        )
    x = torch.from_numpy(images.astype(np.float64) / 255.0)
    x = ((x - mean) / std).unsqueeze(1)
    y = torch.from_numpy(labels.astype(np.int64))
    logger.get_logger().debug("loaded %d %s images of %s", len(y), split, tuple(images.shape[1:]))
    return Dataset(x, y, split, 10, (mean,), (std,))


def _find(folder: str, stem: str) -> str:
    for name in (stem, stem + ".gz"):
        p = os.path.join(folder, name)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {folder}")


def has_mnist(folder: str) -> bool:
    try:
        for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
            _find(folder, stem)
    except FileNotFoundError:
        return False
    return True


def load_mnist(folder: str, mean: float = 0.1307, std: float = 0.3081) -> Tuple[Dataset, Dataset]:
    train = load_mnist_idx(
        _find(folder, "train-images-idx3-ubyte"), _find(folder, "train-labels-idx1-ubyte"), "train", mean, std
    )
    test = load_mnist_idx(
        _find(folder, "t10k-images-idx3-ubyte"), _find(folder, "t10k-labels-idx1-ubyte"), "test", mean, std
    )
    return train, test


def synthetic_classification(
    n: int,
    d: int,
    classes: int,
    seed,
    margin: float = 4.0,
    split: str = "train",
    centers: Optional[torch.Tensor] = None,
) -> Dataset:
    """
    Gaussian blobs with unit variance around class centers placed `margin`
    apart along orthogonal directions (random directions when d < classes).
    Sample i belongs to class i % classes before shuffling, so class counts
    differ by at most one. Pass the train split's `centers` to draw a test
    split from the same distribution.
    """
    if classes < 2 or n < classes or d < 1:
        raise ValueError(f"need classes >= 2, n >= classes and d >= 1, got n={n} d={d} classes={classes}")
    g = generator_from(seed)
    if centers is None:
        centers = synthetic_centers(d, classes, margin, g)
    labels = torch.arange(n) % classes
    labels = labels[torch.randperm(n, generator=g)]
    x = centers[labels] + torch.randn((n, d), generator=g, dtype=torch.float64)
    return Dataset(x, labels, split, classes, centers=centers)


def synthetic_centers(d: int, classes: int, margin: float, generator) -> torch.Tensor:
    g = generator_from(generator)
    if d >= classes:
        basis = torch.eye(d, dtype=torch.float64)[:classes]
    else:
        basis = torch.randn((classes, d), generator=g, dtype=torch.float64)
        basis = basis / basis.norm(dim=1, keepdim=True)
    return basis * (margin / 2.0 ** 0.5)


def load_cifar10_bin(paths: List[str], split: str = "train", normalize: bool = True) -> Dataset:
    """CIFAR-10 binary batches: 3073-byte records, label byte then 3x32x32 pixels."""
    chunks = []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise IDXFormatError(f"{p}: truncated, {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = torch.from_numpy(records[:, 0].astype(np.int64))
    x = torch.from_numpy(records[:, 1:].astype(np.float64) / 255.0).view(-1, 3, 32, 32)
    mean, std = (CIFAR_MEAN, CIFAR_STD) if normalize else ((0.0,) * 3, (1.0,) * 3)
    x = (x - torch.tensor(mean, dtype=torch.float64).view(1, 3, 1, 1)) / torch.tensor(
        std, dtype=torch.float64
    ).view(1, 3, 1, 1)
    return Dataset(x, labels, split, 10, mean, std)


def load_cifar10(folder: str) -> Tuple[Dataset, Dataset]:
    train = [os.path.join(folder, f"data_batch_{i}.bin") for i in range(1, 6)]
    test = [os.path.join(folder, "test_batch.bin")]
    return load_cifar10_bin(train, "train"), load_cifar10_bin(test, "test")


def hflip(batch: torch.Tensor) -> torch.Tensor:
    return batch.flip(-1)


def augment_cifar(batch: torch.Tensor, generator, enabled: bool = True, pad: int = 4) -> torch.Tensor:
    """
    Random translation by up to `pad` pixels (zero padding then crop back to
    the input size) and a horizontal flip with probability 1/2, per sample.
    """
    if not enabled:
        return batch
    g = generator_from(generator)
    n, _, h, w = batch.shape
    padded = torch.nn.functional.pad(batch, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=g)
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=g)
    flip = torch.rand((n,), generator=g) < 0.5
    out = torch.empty_like(batch)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = hflip(crop) if flip[i] else crop
    return out


def iterate_batches(
    ds: Dataset, batch_size: int, generator=None, shuffle: bool = True
) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    n = len(ds)
    order = torch.randperm(n, generator=generator_from(generator)) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]
