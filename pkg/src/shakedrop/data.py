"""Datasets: CIFAR binary files, synthetic generators, augmentation and mixup."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_LABEL_BYTES = {"cifar10": 1, "cifar100": 2}
CIFAR_CLASSES = {"cifar10": 10, "cifar100": 100}


@dataclass
class LabeledImageSet:
    """N×C×H×W images in [0, 1] with integer labels in [0, K).

    ``mean``/``std`` are per-channel normalization constants; when omitted
    they are computed from the images themselves.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError("images must be N×C×H×W")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        c = self.images.shape[1]
        if self.mean is None:
            self.mean = self.images.mean(axis=(0, 2, 3)) if len(self) else np.zeros(c)
        if self.std is None:
            std = self.images.std(axis=(0, 2, 3)) if len(self) else np.ones(c)
            self.std = np.where(std > 0, std, 1.0)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.num_classes, self.mean, self.std)


@dataclass(frozen=True)
class AugmentConfig:
    """Flip, zero-pad and random-crop settings; ``crop=None`` keeps the input size."""

    flip_probability: float = 0.5
    pad: int = 4
    crop: Optional[int] = 32
    flip_enabled: bool = True
    crop_enabled: bool = True
    mixup_alpha: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.pad < 0:
            raise ValueError("pad must be >= 0")
        if self.mixup_alpha is not None and self.mixup_alpha <= 0:
            raise ValueError("mixup Beta parameter must be > 0")


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    c = images.shape[1]
    return (images - np.reshape(mean, (1, c, 1, 1))) / np.reshape(std, (1, c, 1, 1))


def denormalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    c = images.shape[1]
    return images * np.reshape(std, (1, c, 1, 1)) + np.reshape(mean, (1, c, 1, 1))


def augment(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator, *,
            mean: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None) -> np.ndarray:
    """Normalize, flip horizontally with probability p, zero-pad, then random-crop.

    Each image draws its own flip and crop offset. Padding happens after
    normalization, so the padded border is zero in normalized space.
    """
    x = np.asarray(images, dtype=np.float64)
    if mean is not None:
        x = normalize(x, mean, std)
    n, c, h, w = x.shape
    if config.flip_enabled and config.flip_probability > 0:
        flips = rng.random(n) < config.flip_probability
        x = np.where(flips[:, None, None, None], x[..., ::-1], x)
    if config.crop_enabled:
        pad = config.pad
        ch, cw = (h, w) if config.crop is None else (config.crop, config.crop)
        if ch > h + 2 * pad or cw > w + 2 * pad:
            raise ValueError(f"crop {ch}×{cw} larger than padded image {h + 2 * pad}×{w + 2 * pad}")
        if pad or ch != h or cw != w:
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            oy = rng.integers(0, h + 2 * pad - ch + 1, size=n)
            ox = rng.integers(0, w + 2 * pad - cw + 1, size=n)
            x = np.stack([xp[i, :, oy[i]:oy[i] + ch, ox[i]:ox[i] + cw] for i in range(n)])
    return np.ascontiguousarray(x)


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup(images: np.ndarray, labels_onehot: np.ndarray, a: float, rng: np.random.Generator, *,
          lam: Optional[float] = None, perm: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Blend each sample with a permuted partner using one ``lam ~ Beta(a, a)`` per batch."""
    if a <= 0:
        raise ValueError("mixup Beta parameter must be > 0")
    n = len(images)
    if n < 2:
        return images, labels_onehot
    if lam is None:
        lam = rng.beta(a, a)
    if perm is None:
        perm = rng.permutation(n)
    x = lam * images + (1.0 - lam) * images[perm]
    y = lam * labels_onehot + (1.0 - lam) * labels_onehot[perm]
    return x, y


# synthetic data -------------------------------------------------------------

def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def synth_dataset(kind: str, n: int, k: int, noise: float, rng: np.random.Generator, *,
                  image_size: int = 8, channels: int = 3) -> LabeledImageSet:
    """Seeded desk-scale datasets whose classes are separable at ``noise = 0``.

    * ``blobs``: one random centroid image per class plus Gaussian noise.
    * ``spiral``: K interleaved spiral arms; each point fills constant channels.
    * ``striped-images``: sinusoidal stripes whose orientation encodes the
      class, with a random phase per image.
    """
    if n < k:
        raise ValueError("need at least one sample per class")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    labels = _balanced_labels(n, k, rng)
    shape = (channels, image_size, image_size)
    if kind == "blobs":
        centroids = rng.uniform(0.2, 0.8, size=(k,) + shape)
        images = centroids[labels] + noise * rng.standard_normal((n,) + shape)
    elif kind == "spiral":
        t = rng.uniform(0.15, 1.0, size=n)
        angle = 2 * np.pi * labels / k + 2.5 * t
        u = 0.5 + 0.45 * t * np.cos(angle)
        v = 0.5 + 0.45 * t * np.sin(angle)
        coords = np.stack([u, v, (u + v) / 2] + [t] * max(0, channels - 3), axis=1)[:, :channels]
        coords = coords + noise * rng.standard_normal(coords.shape)
        images = np.broadcast_to(coords[:, :, None, None], (n,) + shape).copy()
    elif kind == "striped-images":
        yy, xx = np.mgrid[0:image_size, 0:image_size]
        theta = np.pi * labels / k
        phase = rng.uniform(0, 2 * np.pi, size=n)
        proj = (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None])
        pattern = 0.5 + 0.4 * np.sin(2 * np.pi * proj / 4.0 + phase[:, None, None])
        tint = rng.uniform(0.6, 1.0, size=(n, channels))
        images = tint[:, :, None, None] * pattern[:, None]
        images = images + noise * rng.standard_normal((n,) + shape)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return LabeledImageSet(np.clip(images, 0.0, 1.0), labels, k)


# CIFAR binary ---------------------------------------------------------------

def _record_len(variant: str) -> int:
    if variant not in CIFAR_LABEL_BYTES:
        raise ValueError(f"variant must be one of {sorted(CIFAR_LABEL_BYTES)}")
    return CIFAR_LABEL_BYTES[variant] + CIFAR_PIXELS


def load_cifar_binary(path: Union[str, Path], variant: str = "cifar10") -> LabeledImageSet:
    """Read a CIFAR-10/100 binary batch file.

    Records are a label byte (CIFAR-100: coarse then fine) followed by the
    R, G and B planes of 1024 row-major bytes each. CIFAR-100 keeps the fine
    label.
    """
    rec = _record_len(variant)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % rec:
        raise ValueError(f"truncated {variant} file: {raw.size} bytes is not a multiple of {rec}")
    rows = raw.reshape(-1, rec)
    nlab = CIFAR_LABEL_BYTES[variant]
    labels = rows[:, nlab - 1].astype(np.int64)
    k = CIFAR_CLASSES[variant]
    if len(labels) and labels.max() >= k:
        raise ValueError(f"label {labels.max()} out of range for {variant}")
    images = rows[:, nlab:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledImageSet(images, labels, k)


def write_cifar_binary(path: Union[str, Path], images: np.ndarray, labels: np.ndarray,
                       variant: str = "cifar10", coarse_labels: Optional[np.ndarray] = None) -> None:
    """Write uint8 N×3×32×32 images in the CIFAR binary layout."""
    _record_len(variant)
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise ValueError("images must be uint8 with shape N×3×32×32")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    parts = [labels]
    if variant == "cifar100":
        coarse = np.zeros_like(labels) if coarse_labels is None else np.asarray(coarse_labels, np.uint8).reshape(-1, 1)
        parts = [coarse, labels]
    body = np.concatenate(parts + [images.reshape(len(images), -1)], axis=1)
    body.tofile(path)
