"""Synthetic 2-d classification datasets and an IDX reader.

Generation is fully deterministic: the same kind/size/noise/seed tuple
always produces byte-identical arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

KINDS = ("blobs", "spirals", "xor-grid")


@dataclass
class Dataset:
    inputs: np.ndarray   # (n, features) float64
    labels: np.ndarray   # (n,) int64
    train_idx: np.ndarray
    val_idx: np.ndarray
    kind: str = "custom"
    seed: int = 0
    noise: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a (n, features) matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must align with inputs")
        overlap = np.intersect1d(self.train_idx, self.val_idx)
        if overlap.size:
            raise ValueError("train and validation splits overlap")

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def train_x(self) -> np.ndarray:
        return self.inputs[self.train_idx]

    @property
    def train_y(self) -> np.ndarray:
        return self.labels[self.train_idx]

    @property
    def val_x(self) -> np.ndarray:
        return self.inputs[self.val_idx]

    @property
    def val_y(self) -> np.ndarray:
        return self.labels[self.val_idx]


def _split(n: int, val_fraction: float, rng: np.random.Generator):
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("validation fraction must be in [0, 1)")
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return perm[n_val:], perm[:n_val]


def generate_dataset(
    kind: str,
    n: int = 1000,
    classes: int = 2,
    noise: float | None = None,
    seed: int = 0,
    val_fraction: float = 0.2,
) -> Dataset:
    """Sample one of the built-in 2-d problems.

    blobs: class centers on a circle of radius 2.5, isotropic Gaussian
    spread of ``noise`` (default 0.35). With noise 0 every point sits on
    its center, so the classes are linearly separable.

    spirals: interleaved arms, one per class, radius growing with angle;
    ``noise`` (default 0.12) is positional jitter. Not linearly separable
    for any sane noise level.

    xor-grid: uniform points on [-1, 1]^2 labeled by a classes-by-classes
    checkerboard; ``noise`` jitters positions after labeling.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; options: {KINDS}")
    if classes < 2:
        raise ValueError("need at least two classes")
    if n < classes:
        raise ValueError("need at least one point per class")
    if noise is not None and noise < 0:
        raise ValueError("noise cannot be negative")

    rng = np.random.default_rng((seed, hash_kind(kind)))
    labels = np.arange(n, dtype=np.int64) % classes

    if kind == "blobs":
        sigma = 0.35 if noise is None else noise
        angles = 2.0 * np.pi * labels / classes
        centers = 2.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        points = centers + rng.normal(0.0, 1.0, size=(n, 2)) * sigma
    elif kind == "spirals":
        sigma = 0.08 if noise is None else noise
        u = rng.uniform(0.0, 1.0, size=n)
        radius = 0.3 + 1.2 * u
        angle = 1.5 * 2.0 * np.pi * u + 2.0 * np.pi * labels / classes
        points = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        points += rng.normal(0.0, 1.0, size=(n, 2)) * sigma
    else:  # xor-grid
        sigma = 0.0 if noise is None else noise
        points = rng.uniform(-1.0, 1.0, size=(n, 2))
        cells = np.clip(((points + 1.0) / 2.0 * classes).astype(np.int64), 0, classes - 1)
        labels = ((cells[:, 0] + cells[:, 1]) % classes).astype(np.int64)
        points = points + rng.normal(0.0, 1.0, size=(n, 2)) * sigma

    train_idx, val_idx = _split(n, val_fraction, rng)
    return Dataset(
        inputs=points,
        labels=labels,
        train_idx=train_idx,
        val_idx=val_idx,
        kind=kind,
        seed=seed,
        noise=float(sigma),
        meta={"n": n, "classes": classes, "val_fraction": val_fraction},
    )


def hash_kind(kind: str) -> int:
    # Stable across processes, unlike the builtin hash of a str.
    return sum(ord(c) * 31 ** i for i, c in enumerate(kind)) % (2 ** 31)


# -- IDX ingestion ------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(Exception):
    pass


class IdxMagicError(IdxError):
    """File does not start with the expected IDX magic number."""


class IdxTruncatedError(IdxError):
    """File ends before the payload its header promises."""


class IdxCountMismatchError(IdxError):
    """Image and label files disagree on the number of records."""


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IdxTruncatedError(f"{path}: truncated while reading {what}")
    return data


def load_idx(images_path, labels_path, val_fraction: float = 0.0,
             seed: int = 0) -> Dataset:
    """Read an IDX image/label pair into a Dataset.

    Pixels are scaled to [0, 1]; images flatten to (count, rows*cols).
    """
    with open(images_path, "rb") as fh:
        magic, n_images, rows, cols = struct.unpack(
            ">IIII", _read_exact(fh, 16, images_path, "image header")
        )
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(
                f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        raw = _read_exact(fh, n_images * rows * cols, images_path, "pixel data")
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(
            ">II", _read_exact(fh, 8, labels_path, "label header")
        )
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(
                f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        raw_labels = _read_exact(fh, n_labels, labels_path, "label data")
    if n_images != n_labels:
        raise IdxCountMismatchError(
            f"{n_images} images vs {n_labels} labels"
        )
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n_images, rows * cols)
    inputs = images.astype(np.float64) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    rng = np.random.default_rng((seed, 1))
    train_idx, val_idx = _split(n_images, val_fraction, rng)
    return Dataset(
        inputs=inputs,
        labels=labels,
        train_idx=train_idx,
        val_idx=val_idx,
        kind="idx",
        seed=seed,
        meta={"rows": int(rows), "cols": int(cols)},
    )
