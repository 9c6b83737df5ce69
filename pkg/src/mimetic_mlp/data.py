"""CIFAR-10 binary ingestion, the synthetic template task, augmentation and batching."""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .seeding import stream_rng

logger = logging.getLogger(__name__)

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
RECORD_BYTES = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64, channel-normalized
    labels: np.ndarray  # [N] int64
    split: str
    num_classes: int
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.images.flags.writeable = False
        self.labels.flags.writeable = False
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on N")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n].copy(), self.labels[:n].copy(), self.split, self.num_classes,
                       self.mean, self.std)

    def denormalize(self) -> np.ndarray:
        m = np.asarray(self.mean)[None, :, None, None]
        s = np.asarray(self.std)[None, :, None, None]
        return self.images * s + m


def normalize(pixels01: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (pixels01 - m) / s


# ---------------------------------------------------------------------------
# CIFAR-10 binary format: per record 1 label byte, then 1024 R, 1024 G, 1024 B bytes

def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(uint8 images [N, 3, 32, 32], int64 labels [N])``."""
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"{source}: length {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{source}: record {bad} has label byte {labels[bad]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def encode_cifar10_bytes(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise FormatError(f"expected uint8 [N, 3, 32, 32] images, got {images.dtype} {images.shape}")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([labels, images.reshape(len(images), -1)], axis=1).tobytes()


def load_cifar10_file(path, mean=CIFAR_MEAN, std=CIFAR_STD, split: str = "train") -> Dataset:
    raw = Path(path).read_bytes()
    images, labels = parse_cifar10_bytes(raw, str(path))
    return Dataset(normalize(images / 255.0, mean, std), labels, split, 10, tuple(mean), tuple(std))


def load_cifar10(dir_path, mean=CIFAR_MEAN, std=CIFAR_STD) -> tuple[Dataset, Dataset]:
    """Load ``data_batch_1..5.bin`` and ``test_batch.bin`` from ``dir_path``.

    Also accepts the ``cifar-10-batches-bin`` subdirectory that the official tarball unpacks to.
    """
    root = Path(dir_path)
    if not (root / CIFAR_TEST_FILE).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (root / f).exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 binary files missing under {root}: {missing}")
    parts = [parse_cifar10_bytes((root / f).read_bytes(), f) for f in CIFAR_TRAIN_FILES]
    train_u8 = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_u8, test_y = parse_cifar10_bytes((root / CIFAR_TEST_FILE).read_bytes(), CIFAR_TEST_FILE)
    train = Dataset(normalize(train_u8 / 255.0, mean, std), train_y, "train", 10, tuple(mean), tuple(std))
    test = Dataset(normalize(test_u8 / 255.0, mean, std), test_y, "test", 10, tuple(mean), tuple(std))
    logger.info("loaded CIFAR-10 from %s: %d train, %d test", root, len(train), len(test))
    return train, test


def default_data_dir() -> str | None:
    return os.environ.get("MIMETIC_DATA_DIR")


# ---------------------------------------------------------------------------
# synthetic task

@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_classes: int = 10
    image_size: int = 16
    channels: int = 3
    frequency_seed: int = 0
    samples_per_class: int = 100
    test_samples_per_class: int = 100
    noise_std: float = 0.5
    max_frequency: int = 2
    max_shift: int = 0

    def __post_init__(self):
        if not 0 <= self.max_shift < self.image_size:
            raise ValueError(f"max_shift must be in [0, image_size), got {self.max_shift}")

    def to_dict(self) -> dict:
        return asdict(self)


def synthetic_templates(spec: SyntheticTaskSpec) -> np.ndarray:
    """Per-class low-frequency patterns ``[K, C, S, S]``, each scaled to unit RMS."""
    rng = stream_rng(spec.frequency_seed, "data.templates")
    S, F = spec.image_size, spec.max_frequency
    grid = np.arange(S) / S
    templates = np.zeros((spec.num_classes, spec.channels, S, S))
    for fy in range(F + 1):
        for fx in range(F + 1):
            amp = rng.standard_normal((spec.num_classes, spec.channels)) / (1 + fx + fy)
            phase = rng.uniform(0, 2 * np.pi, size=(spec.num_classes, spec.channels))
            wave = 2 * np.pi * (fy * grid[:, None] + fx * grid[None, :])
            templates += amp[..., None, None] * np.cos(wave[None, None] + phase[..., None, None])
    rms = np.sqrt((templates ** 2).mean(axis=(1, 2, 3), keepdims=True))
    return templates / rms


def make_synthetic(spec: SyntheticTaskSpec, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Balanced template-plus-Gaussian-noise classification task.

    Templates depend only on ``spec.frequency_seed``; the noise draws depend on
    ``seed`` and are independent between the two splits. With ``max_shift > 0``
    each sample's template is first rolled by a random (dy, dx) in
    ``[0, max_shift]``, so the class pattern sits at an unknown position.
    """
    templates = synthetic_templates(spec)
    out = []
    for split, per_class in (("train", spec.samples_per_class), ("test", spec.test_samples_per_class)):
        rng = stream_rng(seed, f"data.{split}")
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        noise = spec.noise_std * rng.standard_normal((len(labels),) + templates.shape[1:])
        clean = templates[labels]
        if spec.max_shift:
            shifts = rng.integers(0, spec.max_shift + 1, size=(len(labels), 2))
            clean = np.stack([np.roll(t, (dy, dx), axis=(1, 2)) for t, (dy, dx) in zip(clean, shifts)])
        images = clean + noise
        out.append(Dataset(images, labels.astype(np.int64), split, spec.num_classes,
                           (0.0,) * spec.channels, (1.0,) * spec.channels))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# augmentation and batching

def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1]


def pad_crop(image: np.ndarray, dy: int, dx: int, pad: int = 4) -> np.ndarray:
    """Zero-pad ``[C, H, W]`` by ``pad`` and crop ``H x W`` at offset ``(dy, dx)``."""
    C, H, W = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, dy:dy + H, dx:dx + W]


def augment(images: np.ndarray, rng: np.random.Generator, enabled: bool = True, pad: int = 4) -> np.ndarray:
    """Random horizontal flip (p=0.5) and random crop from a ``pad``-pixel zero border."""
    if not enabled:
        return images
    B, C, H, W = images.shape
    flips = rng.random(B) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(B, 2))
    flipped = np.where(flips[:, None, None, None], images[..., ::-1], images)
    padded = np.pad(flipped, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(B):
        dy, dx = offsets[i]
        out[i] = padded[i, :, dy:dy + H, dx:dx + W]
    return out


def epoch_order(n: int, shuffle_seed: int | None, epoch: int) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return stream_rng(shuffle_seed, f"shuffle.{epoch}").permutation(n)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(dataset), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
