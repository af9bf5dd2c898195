"""Datasets, epoch sampling with lookahead, per-channel augmentation and label noise."""

from __future__ import annotations

import csv
import gzip
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

RECIPE_ELEMENTS = ("pad4_crop", "hflip", "cutout")
CROP_PAD = 4


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Images as (N, H, W, C) uint8 plus integer labels.

    ``mean`` and ``std`` are per-plane statistics on the [0, 1] pixel scale,
    used by :meth:`normalized`.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "val"):
            raise DataFormatError(f"split must be 'train' or 'val', got {self.split!r}")
        if self.mean is None or self.std is None:
            self.mean, self.std = plane_stats(self.images)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        """(C, H, W)."""
        _, H, W, C = self.images.shape
        return (C, H, W)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def with_stats(self, mean, std) -> "Dataset":
        return replace(self, mean=np.asarray(mean, dtype=np.float64), std=np.asarray(std, dtype=np.float64))

    def normalize(self, images: np.ndarray, dtype=np.float64) -> np.ndarray:
        """(n, H, W, C) uint8 -> (n, C, H, W) normalized floats."""
        x = images.astype(np.float64) / 255.0
        x = (x - self.mean) / self.std
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=dtype)

    def normalized(self, indices, dtype=np.float64) -> np.ndarray:
        return self.normalize(self.images[indices], dtype)


def plane_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(images) == 0:
        C = images.shape[-1] if images.ndim == 4 else 1
        return np.zeros(C), np.ones(C)
    x = images.reshape(-1, images.shape[-1]).astype(np.float64) / 255.0
    std = x.std(axis=0)
    return x.mean(axis=0), np.where(std > 0, std, 1.0)


# ---------------------------------------------------------------------------
# loaders


def load_cifar10_binary(path, split: str = "train", expected_records: int | None = None) -> Dataset:
    """Read one or more CIFAR-10 binary batch files.

    Each record is one label byte followed by 3072 pixel bytes stored
    plane-major (1024 red, 1024 green, 1024 blue).
    """
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    chunks = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: truncated CIFAR file ({len(raw)} bytes is not a positive multiple of {CIFAR_RECORD})")
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if expected_records is not None and len(recs) != expected_records:
            raise DataFormatError(f"{p}: expected {expected_records} records, found {len(recs)}")
        chunks.append(recs)
    recs = np.concatenate(chunks)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise DataFormatError(f"label byte {labels.max()} out of range for CIFAR-10")
    images = recs[:, 1:].reshape(-1, *CIFAR_SHAPE).transpose(0, 2, 3, 1)
    return Dataset(np.ascontiguousarray(images), labels, 10, split)


def load_cifar10(root) -> tuple[Dataset, Dataset]:
    """Train (50,000) and test (10,000) splits from a ``cifar-10-batches-bin`` directory.

    The test split is normalized with the training statistics.
    """
    root = Path(root)
    train = load_cifar10_binary([root / f for f in CIFAR_TRAIN_FILES], "train", expected_records=10000)
    test = load_cifar10_binary(root / CIFAR_TEST_FILE, "val", expected_records=10000)
    return train, test.with_stats(train.mean, train.std)


def write_cifar10_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_cifar10_binary` for (N, 32, 32, 3) uint8 images."""
    planes = np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(images), -1)
    recs = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    Path(path).write_bytes(recs.tobytes())


def _read_maybe_gz(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def load_idx(path_images, path_labels, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (MNIST layout); grayscale becomes C=1."""
    img = _read_maybe_gz(path_images)
    lab = _read_maybe_gz(path_labels)
    if len(img) < 16 or int.from_bytes(img[:4], "big") != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path_images}: bad IDX image magic")
    if len(lab) < 8 or int.from_bytes(lab[:4], "big") != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path_labels}: bad IDX label magic")
    n, rows, cols = (int.from_bytes(img[4 + 4 * i:8 + 4 * i], "big") for i in range(3))
    n_labels = int.from_bytes(lab[4:8], "big")
    if len(img) - 16 != n * rows * cols:
        raise DataFormatError(f"{path_images}: header says {n}x{rows}x{cols}, payload has {len(img) - 16} bytes")
    if len(lab) - 8 != n_labels:
        raise DataFormatError(f"{path_labels}: header says {n_labels} labels, payload has {len(lab) - 8}")
    if n_labels != n:
        raise DataFormatError(f"{n} images but {n_labels} labels")
    images = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows, cols, 1)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images.copy(), labels, num_classes, split)


def write_idx(path_images, path_labels, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape[:3]
    header = b"".join(v.to_bytes(4, "big") for v in (IDX_IMAGES_MAGIC, n, rows, cols))
    Path(path_images).write_bytes(header + images.tobytes())
    header = IDX_LABELS_MAGIC.to_bytes(4, "big") + len(labels).to_bytes(4, "big")
    Path(path_labels).write_bytes(header + np.asarray(labels, dtype=np.uint8).tobytes())


def random_subset(dataset: Dataset, size: int, seed: int) -> Dataset:
    """Seeded uniform subset without replacement, keeping ``dataset``'s statistics."""
    if size > len(dataset):
        raise ValueError(f"subset of {size} requested from {len(dataset)} samples")
    idx = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:size])
    return dataset.subset(idx)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class MiniBatch:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def make_batch(dataset: Dataset, indices) -> MiniBatch:
    idx = np.asarray(indices, dtype=np.int64)
    return MiniBatch(idx, dataset.images[idx], dataset.labels[idx])


def epoch_batches(n_samples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n_samples)`` cut into ceil(N/n) batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if batch_size > n_samples:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n_samples}")
    perm = np.random.default_rng([seed, epoch]).permutation(n_samples)
    return [perm[i:i + batch_size] for i in range(0, n_samples, batch_size)]


@dataclass
class Step:
    epoch: int
    index: int  # position within the epoch
    global_step: int
    indices: np.ndarray
    lookahead: np.ndarray | None


class EpochSampler:
    """Global-step cursor over ``epochs`` shuffled epochs.

    ``lookahead`` of a step is the next step's batch, crossing into the next
    epoch's first batch at epoch ends; it is ``None`` only at the final step.
    """

    def __init__(self, n_samples: int, batch_size: int, seed: int, epochs: int):
        self.n_samples = n_samples
        self.batch_size = batch_size
        self.seed = seed
        self.epochs = epochs
        self.steps_per_epoch = math.ceil(n_samples / batch_size)
        epoch_batches(n_samples, batch_size, seed, 0)  # validates sizes
        self._cache: dict[int, list[np.ndarray]] = {}

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def batches(self, epoch: int) -> list[np.ndarray]:
        if epoch not in self._cache:
            if len(self._cache) > 2:
                self._cache.pop(min(self._cache))
            self._cache[epoch] = epoch_batches(self.n_samples, self.batch_size, self.seed, epoch)
        return self._cache[epoch]

    def batch(self, epoch: int, index: int) -> np.ndarray:
        return self.batches(epoch)[index]

    def lookahead(self, epoch: int, index: int) -> np.ndarray | None:
        if index + 1 < self.steps_per_epoch:
            return self.batch(epoch, index + 1)
        if epoch + 1 < self.epochs:
            return self.batch(epoch + 1, 0)
        return None

    def epoch_steps(self, epoch: int) -> Iterator[Step]:
        for i in range(self.steps_per_epoch):
            yield Step(epoch, i, epoch * self.steps_per_epoch + i, self.batch(epoch, i), self.lookahead(epoch, i))

    def __iter__(self) -> Iterator[Step]:
        for e in range(self.epochs):
            yield from self.epoch_steps(e)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class ChannelView:
    channel: str
    images: np.ndarray  # (n, C, H, W), normalized
    indices: np.ndarray


def channel_index(channel: str) -> int:
    if len(channel) != 1 or not channel.isupper():
        raise ValueError(f"channel ids are single capital letters, got {channel!r}")
    return ord(channel) - ord("A")


def channel_ids(k: int) -> list[str]:
    return [chr(ord("A") + i) for i in range(k)]


def parse_recipe(recipe: Sequence[str], cutout_size: int = 16) -> tuple[set[str], int]:
    """Validate a recipe; ``cutout:<s>`` sets the cutout side explicitly."""
    ops = set()
    for item in recipe:
        name, _, arg = item.partition(":")
        if name not in RECIPE_ELEMENTS or (arg and name != "cutout"):
            raise ValueError(f"unknown augmentation {item!r}; expected one of {RECIPE_ELEMENTS}")
        if arg:
            cutout_size = int(arg)
        ops.add(name)
    if "cutout" in ops and cutout_size < 1:
        raise ValueError("cutout size must be positive")
    return ops, cutout_size


def sample_rng(seed: int, step: int, channel: str, sample: int) -> np.random.Generator:
    """Counter-based stream for one (seed, step, channel, sample) key."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step, channel_index(channel), int(sample)])))


def cutout_box(cy: int, cx: int, size: int, H: int, W: int) -> tuple[int, int, int, int]:
    """Clipped (y0, y1, x0, x1) of a size x size square centered at (cy, cx)."""
    half = size // 2
    return max(cy - half, 0), min(cy - half + size, H), max(cx - half, 0), min(cx - half + size, W)


def augment_image(img: np.ndarray, rng: np.random.Generator, ops: set[str], cutout_size: int) -> np.ndarray:
    """Apply the recipe to one (H, W, C) uint8 image; the draw order is fixed."""
    H, W, _ = img.shape
    dy, dx = rng.integers(0, 2 * CROP_PAD + 1, size=2)
    flip = rng.random() < 0.5
    cy, cx = rng.integers(0, H), rng.integers(0, W)
    out = img
    if "pad4_crop" in ops:
        padded = np.pad(img, ((CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD), (0, 0)))
        out = padded[dy:dy + H, dx:dx + W]
    if "hflip" in ops and flip:
        out = out[:, ::-1]
    if "cutout" in ops:
        out = out.copy()
        y0, y1, x0, x1 = cutout_box(int(cy), int(cx), cutout_size, H, W)
        out[y0:y1, x0:x1] = 0
    return out


def augment(
    batch: MiniBatch,
    channel: str,
    step: int,
    seed: int,
    recipe: Sequence[str],
    dataset: Dataset,
    cutout_size: int = 16,
    dtype=np.float64,
) -> ChannelView:
    """Augment ``batch`` for one channel, then normalize with ``dataset``'s statistics.

    Each sample draws from its own stream keyed by (seed, step, channel,
    sample index), so the result does not depend on evaluation order.
    """
    ops, cutout_size = parse_recipe(recipe, cutout_size)
    if ops:
        imgs = np.stack(
            [augment_image(img, sample_rng(seed, step, channel, i), ops, cutout_size) for img, i in zip(batch.images, batch.indices)]
        )
    else:
        channel_index(channel)
        imgs = batch.images
    return ChannelView(channel, dataset.normalize(imgs, dtype), batch.indices.copy())


# ---------------------------------------------------------------------------
# label noise


@dataclass(frozen=True)
class NoiseSpec:
    eta: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"noise fraction must lie in [0, 1], got {self.eta}")


def corruption_count(eta: float, n: int) -> int:
    """round(eta * n), halves rounded up."""
    return int(math.floor(eta * n + 0.5))


def inject_label_noise(dataset: Dataset, spec: NoiseSpec) -> tuple[Dataset, np.ndarray]:
    """Symmetric label noise on the training split.

    Exactly ``round(eta * N)`` samples, chosen uniformly without replacement,
    receive a label drawn uniformly from the other K-1 classes.  Returns the
    corrupted dataset and a boolean mask of changed indices.
    """
    if dataset.split != "train":
        raise ValueError("label noise is only injected into the training split")
    n = len(dataset)
    mask = np.zeros(n, dtype=bool)
    count = corruption_count(spec.eta, n)
    if count == 0:
        return dataset, mask
    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(n, size=count, replace=False)
    offsets = rng.integers(1, dataset.num_classes, size=count)
    labels = dataset.labels.copy()
    labels[chosen] = (labels[chosen] + offsets) % dataset.num_classes
    mask[chosen] = True
    return replace(dataset, labels=labels), mask


def write_noise_csv(path, original: Dataset, noisy: Dataset, mask: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "old_label", "new_label"])
        for i in np.flatnonzero(mask):
            w.writerow([int(i), int(original.labels[i]), int(noisy.labels[i])])
