"""Datasets: IDX and CSV readers plus a seeded synthetic grating generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadDims, BadMagic, CountMismatch, EmptyDataset, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), values in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if self.images.ndim != 4:
            raise BadDims(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatch(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if np.isnan(self.images).any():
            raise BadDims("images contain NaN")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def astype(self, dtype):
        return Dataset(self.images.astype(dtype, copy=False), self.labels)

    def require_nonempty(self):
        if len(self) == 0:
            raise EmptyDataset("dataset has no samples")
        return self


def _read_idx(path, magic, ndim):
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise TruncatedFile(f"{path}: missing IDX header")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedFile(f"{path}: header needs {header} bytes, file has {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    size = int(np.prod(dims))
    if len(blob) < header + size:
        raise TruncatedFile(f"{path}: expected {size} data bytes, found {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255, one channel."""
    pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if pixels.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{pixels.shape[0]} images but {labels.shape[0]} labels")
    images = (pixels.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64))


def write_idx(images_path, labels_path, pixels, labels):
    """Write uint8 ``pixels`` of shape (N, H, W) and ``labels`` of shape (N,)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *pixels.shape))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_csv(path, channels=1, height=None, width=None) -> Dataset:
    """Read ``label,pix0,pix1,...`` rows (header line first, pixels 0-255).

    Pixels are row-major over (C, H, W).  Without ``height``/``width`` the
    image is assumed square.
    """
    rows = [line for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]
            if line.strip()]
    if not rows:
        return Dataset(np.zeros((0, channels, height or 0, width or 0)),
                       np.zeros(0, dtype=np.int64))
    raw = np.loadtxt(rows, delimiter=",", ndmin=2, dtype=np.float64)
    labels = raw[:, 0].astype(np.int64)
    pixels = raw[:, 1:]
    per_channel, rem = divmod(pixels.shape[1], channels)
    if rem:
        raise BadDims(f"{pixels.shape[1]} pixels per row not divisible by {channels} channels")
    if height is None or width is None:
        side = int(round(np.sqrt(per_channel)))
        if side * side != per_channel:
            raise BadDims(f"{per_channel} pixels per channel is not a square; give height/width")
        height = width = side
    if height * width != per_channel:
        raise BadDims(f"{per_channel} pixels per channel != {height}x{width}")
    if pixels.min() < 0 or pixels.max() > 255:
        raise BadDims("CSV pixel values must lie in [0, 255]")
    images = (pixels / 255.0).reshape(-1, channels, height, width)
    return Dataset(images, labels)


def synth_dataset(seed, n, num_classes, height, width, channels, noise=0.25) -> Dataset:
    """Seeded class-conditional gratings.

    Class ``c`` is a sinusoidal grating with orientation ``pi * c / num_classes``
    and ``2 + c % 3`` cycles across the image; every sample gets a random
    phase (so the class mean is nearly flat and a pixel-linear model does
    poorly) plus uniform noise of amplitude ``noise``.  Labels are balanced
    (``i % num_classes``) and shuffled.  Identical arguments give
    bitwise-identical output.
    """
    if min(height, width, channels, num_classes) < 1 or n < num_classes:
        raise BadDims(f"need n >= num_classes >= 1 and positive image dims, got "
                      f"n={n}, classes={num_classes}, {channels}x{height}x{width}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    theta = np.pi * labels / num_classes + rng.normal(0.0, 0.05, size=n)
    cycles = 2.0 + (labels % 3)
    phase = rng.uniform(0.0, 2 * np.pi, size=n)
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    arg = 2 * np.pi * cycles[:, None, None] * proj + phase[:, None, None]
    chan_shift = np.arange(channels) * (np.pi / 3)
    wave = np.sin(arg[:, None, :, :] + chan_shift[None, :, None, None])
    images = 0.5 + 0.35 * wave + rng.uniform(-noise, noise, size=wave.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels)
