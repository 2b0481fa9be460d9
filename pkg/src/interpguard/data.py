"""Datasets: IDX and CIFAR-style binary loaders plus seeded synthetic generators."""

import gzip
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ._validation import InterpGuardError, InvalidInputError, check_labels, check_unit_range, one_hot

SPLITS = ("train", "detector_train", "rf_train", "test")
SYNTH_KINDS = ("blobs", "stripes", "templates")


class DatasetFormatError(InterpGuardError, ValueError):
    """A dataset file could not be parsed."""


class IdxMagicError(DatasetFormatError):
    pass


class IdxTruncatedError(DatasetFormatError):
    pass


class IdxCountMismatchError(DatasetFormatError):
    pass


@dataclass
class Dataset:
    """Images ``(N, rows, cols, channels)`` in [0, 1] with integer labels.

    ``splits`` holds one tag from :data:`SPLITS` per example (or ``None``).
    """

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""
    splits: np.ndarray = None

    def __post_init__(self):
        self.images = check_unit_range(np.asarray(self.images, dtype=np.float64), "dataset images")
        if self.images.ndim != 4:
            raise InvalidInputError(f"images must be (N, rows, cols, channels), got {self.images.shape}")
        self.labels = check_labels(self.labels, len(self.images), self.n_classes)
        if self.splits is not None:
            self.splits = np.asarray(self.splits, dtype=object)
            if self.splits.shape != (len(self.images),):
                raise InvalidInputError("one split tag per example is required")
            bad = set(self.splits) - set(SPLITS)
            if bad:
                raise InvalidInputError(f"unknown split tag(s) {sorted(bad)}")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def one_hot_labels(self):
        return one_hot(self.labels, self.n_classes)

    def subset(self, index, name=None):
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.n_classes, name or self.name,
                       None if self.splits is None else self.splits[index])

    def split(self, tag):
        if self.splits is None:
            raise InvalidInputError(f"dataset {self.name!r} has no split tags")
        return self.subset(np.flatnonzero(self.splits == tag), f"{self.name}:{tag}")

    def with_splits(self, fractions, seed=0):
        """Tag examples with disjoint splits in the given proportions.

        ``fractions`` maps split names to weights; a seeded permutation
        decides membership.
        """
        names = list(fractions)
        weights = np.array([fractions[k] for k in names], dtype=np.float64)
        if np.any(weights < 0) or weights.sum() <= 0:
            raise InvalidInputError("split fractions must be non-negative with a positive total")
        bounds = np.floor(np.cumsum(weights) / weights.sum() * len(self) + 1e-9).astype(int)
        bounds[-1] = len(self)
        order = np.random.default_rng(seed).permutation(len(self))
        tags = np.empty(len(self), dtype=object)
        start = 0
        for name, stop in zip(names, bounds):
            tags[order[start:stop]] = name
            start = stop
        return Dataset(self.images, self.labels, self.n_classes, self.name, tags)


# -- IDX ------------------------------------------------------------------------

def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw, magic, ndim, path):
    if len(raw) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{path}: header is truncated")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxMagicError(f"{path}: magic number 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path, labels_path, n_classes=None, name="idx"):
    """Read an IDX image/label file pair (optionally gzip-compressed).

    Pixels are scaled by 1/255. Wrong magic numbers, truncated payloads and a
    label/image count mismatch raise distinct :class:`DatasetFormatError`
    subclasses.
    """
    images = _parse_idx(_read_bytes(images_path), 0x00000803, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), 0x00000801, 1, labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images[..., np.newaxis] / 255.0, labels, n_classes, name)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(N, rows, cols)`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", 0x00000803, *images.shape) + images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", 0x00000801, len(labels)) + labels.tobytes())


def load_cifar_binary(path, n_classes=10, name="cifar"):
    """Read CIFAR-10 style binary rows: one label byte then 3x32x32 planar pixels."""
    raw = _read_bytes(path)
    row = 1 + 3 * 32 * 32
    if len(raw) % row:
        raise IdxTruncatedError(f"{path}: size {len(raw)} is not a multiple of the {row}-byte row")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, row)
    images = arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return Dataset(images, arr[:, 0].astype(np.int64), n_classes, name)


# -- synthetic data -------------------------------------------------------------

def _grid(size):
    return np.mgrid[0:size, 0:size] + 0.5 - size / 2


def _blobs(n, rng, size, n_classes):
    """One bright Gaussian blob whose position on a ring encodes the class."""
    yy, xx = _grid(size)
    y = rng.integers(n_classes, size=n)
    angle = 2 * np.pi * y / n_classes
    radius = size * 0.3
    images = np.empty((n, size, size))
    for i in range(n):
        cy = radius * np.sin(angle[i]) + rng.normal(0, 0.4)
        cx = radius * np.cos(angle[i]) + rng.normal(0, 0.4)
        width = rng.uniform(1.2, 1.8) * size / 16
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        images[i] = blob * rng.uniform(0.7, 1.0) + rng.normal(0, 0.03, (size, size))
    return images, y


def _stripes(n, rng, size, n_classes, noise=0.05):
    """Sinusoidal stripes inside an elliptical patch; orientation encodes the class."""
    yy, xx = _grid(size)
    y = rng.integers(n_classes, size=n)
    images = np.empty((n, size, size))
    for i in range(n):
        theta = np.pi * y[i] / n_classes + rng.normal(0, 0.04)
        freq = rng.uniform(0.18, 0.28)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        cy, cx = rng.normal(0, 1, 2)
        ry, rx = rng.uniform(4.5, 7, 2) * size / 16
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        img = mask * (0.3 + 0.7 * wave) * rng.uniform(0.6, 1.0)
        images[i] = gaussian_filter(img, 0.5) + mask * rng.normal(0, noise, (size, size))
    return images, y


def _templates(n, rng, size, n_classes, n_parts=12, parts_per_class=4, noise=0.05):
    """Silhouettes assembled from a fixed pool of ellipse/rectangle parts.

    The part pool and class membership are fixed; only placement jitter,
    scale and texture vary with the seed.
    """
    layout = np.random.default_rng(12345)
    parts = [(layout.uniform(4, size - 4), layout.uniform(4, size - 4),
              layout.uniform(1.5, 4) * size / 16, layout.uniform(1.5, 4) * size / 16, layout.integers(2))
             for _ in range(n_parts)]
    members = [layout.choice(n_parts, parts_per_class, replace=False) for _ in range(n_classes)]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    y = rng.integers(n_classes, size=n)
    images = np.empty((n, size, size))
    for i in range(n):
        img = np.zeros((size, size))
        shift = rng.normal(0, size / 16, 2)
        for p in members[y[i]]:
            cy, cx, ry, rx, kind = parts[p]
            cy += shift[0] + rng.normal(0, 0.3)
            cx += shift[1] + rng.normal(0, 0.3)
            ry *= rng.uniform(0.85, 1.15)
            rx *= rng.uniform(0.85, 1.15)
            if kind == 0:
                m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
            else:
                m = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            img = np.maximum(img, m * rng.uniform(0.5, 1.0))
        img = img * (1 + 0.25 * gaussian_filter(rng.normal(0, 1, (size, size)), 1.0))
        img = gaussian_filter(img, 0.6)
        images[i] = img + (img > 0.05) * rng.normal(0, noise, (size, size))
    return images, y


def synth_dataset(kind, n, seed=0, size=16, n_classes=10):
    """Seeded synthetic grayscale dataset of ``n`` images ``(size, size, 1)``.

    ``blobs`` and ``stripes`` are separable by construction (position and
    orientation); ``templates`` is harder, with overlapping part sets.
    """
    if kind not in SYNTH_KINDS:
        raise InvalidInputError(f"unknown synthetic dataset {kind!r}; choose from {SYNTH_KINDS}")
    if n < 0 or n_classes < 2 or size < 8:
        raise InvalidInputError("need n >= 0, n_classes >= 2 and size >= 8")
    rng = np.random.default_rng(seed)
    make = {"blobs": _blobs, "stripes": _stripes, "templates": _templates}[kind]
    if n == 0:
        images, labels = np.zeros((0, size, size)), np.zeros(0, dtype=np.int64)
    else:
        images, labels = make(n, rng, size, n_classes)
    return Dataset(np.clip(images, 0.0, 1.0)[..., np.newaxis], labels, n_classes, f"{kind}-{size}")
