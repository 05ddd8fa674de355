"""Dataset sources: the procedural desk-scale image set and CIFAR-10 binaries."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..models import Dataset

CIFAR_RECORD = 3073
CIFAR_SHAPE = (32, 32, 3)


@dataclass(frozen=True)
class PatternStyle:
    """Knobs of the procedural renderer (defaults are the desk-scale set)."""

    background: tuple[float, float] = (0.3, 0.7)
    amplitude: tuple[float, float] = (0.04, 0.10)
    frequency: tuple[float, float] = (0.14, 0.22)  # cycles per pixel
    orientation_jitter: float = np.pi / 18
    blobs: int = 3
    blob_amplitude: float = 0.12
    blob_width: tuple[float, float] = (1.5, 3.5)
    noise: float = 0.06


def generate_synthetic_dataset(shape=(16, 16, 1), classes: int = 4, size: int = 5000,
                               rng: np.random.Generator | int = 0,
                               style: PatternStyle = PatternStyle()) -> Dataset:
    """Render oriented sinusoidal gratings on cluttered backgrounds.

    Class ``c`` fixes the grating orientation at ``c * pi / classes``; phase,
    frequency, amplitude, background level, clutter blobs and pixel noise are
    drawn per image.  Labels are balanced (round-robin, then shuffled).
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(rng)
    h, w, c = shape
    labels = rng.permutation(np.arange(size) % classes)
    yy, xx = np.meshgrid(np.arange(h) + 0.5 - h / 2, np.arange(w) + 0.5 - w / 2, indexing="ij")
    images = np.empty((size, h, w, c))
    s = style
    for i, label in enumerate(labels):
        theta = np.pi * label / classes + rng.uniform(-s.orientation_jitter, s.orientation_jitter)
        freq = rng.uniform(*s.frequency)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(*s.amplitude)
        along = xx * np.cos(theta) + yy * np.sin(theta)
        img = rng.uniform(*s.background) + amp * np.sin(2 * np.pi * freq * along + phase)
        for _ in range(s.blobs):
            cy, cx = rng.uniform(-h / 2, h / 2), rng.uniform(-w / 2, w / 2)
            width = rng.uniform(*s.blob_width)
            img = img + rng.uniform(-s.blob_amplitude, s.blob_amplitude) * np.exp(
                -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        img = img[:, :, None] + s.noise * rng.standard_normal((h, w, c))
        images[i] = img
    images = np.clip(images, 0.0, 1.0).reshape(size, -1)
    return Dataset(images, labels, classes, tuple(shape))


class CifarFormatError(ValueError):
    pass


def load_cifar10(path) -> Dataset:
    """Parse a CIFAR-10 binary batch: 1 label byte + 3072 channel-planar pixel bytes per record.

    Images are returned in HWC order scaled by 1/255.
    """
    size = os.path.getsize(path)
    if size == 0 or size % CIFAR_RECORD:
        raise CifarFormatError(f"{path}: size {size} is not a multiple of {CIFAR_RECORD}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise CifarFormatError(f"{path}: label byte {labels.max()} out of range")
    planar = raw[:, 1:].reshape(-1, 3, 32, 32)
    images = planar.transpose(0, 2, 3, 1).reshape(len(raw), -1) / 255.0
    return Dataset(images, labels, 10, CIFAR_SHAPE)
