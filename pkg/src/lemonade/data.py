"""Datasets: a seeded synthetic image task, IDX file loading/writing, stratified splits."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IdxFormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), values in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "dataset"
    source: str = ""
    extra_labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError("images must be (N, C, H, W) with one label per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def input_spec(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, name=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       name or self.name, self.source,
                       {k: v[idx] for k, v in self.extra_labels.items()})

    def task(self, name):
        """Copy whose primary labels are the named extra label set."""
        if name in (None, "main"):
            return self
        return Dataset(self.images, self.extra_labels[name], self.num_classes,
                       f"{self.name}/{name}", self.source)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()


def gen_synthetic(num_examples=2400, num_classes=4, image_size=12, seed=0, noise=0.35):
    """Oriented gratings with a random phase and a distractor blob, plus pixel noise.

    The class sets the grating's orientation (and, beyond 4 classes, its frequency), so
    the label is carried by local oriented energy rather than by any fixed pixel
    template: averaged over phases every class has the same mean image. The quadrant of
    the blob is stored as a second label set ``"blob"``.
    """
    if image_size < 8:
        raise ValueError("image_size must be at least 8")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(num_examples) % num_classes
    rng.shuffle(labels)
    n_orient = min(num_classes, 4)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    theta = np.pi * (labels % n_orient) / n_orient
    freq = 2 * np.pi * (0.22 + 0.1 * (labels // n_orient)) + rng.uniform(-0.05, 0.05, num_examples)
    phase = rng.uniform(0, 2 * np.pi, num_examples)
    contrast = rng.uniform(0.4, 1.0, num_examples)
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    grating = contrast[:, None, None] * np.cos(freq[:, None, None] * proj + phase[:, None, None])

    blob_label = rng.integers(0, num_classes, num_examples)
    q = blob_label % 4
    half = image_size / 2
    cy = (q // 2) * half + rng.uniform(0.2, 0.8, num_examples) * half
    cx = (q % 2) * half + rng.uniform(0.2, 0.8, num_examples) * half
    blob = np.exp(-((yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2) / 4.0)

    img = 0.5 + 0.25 * grating + 0.3 * blob + noise * 0.25 * rng.normal(size=grating.shape)
    # quantized to byte levels so an IDX round trip is value-exact
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0)[:, None] / 255.0
    return Dataset(img, labels, num_classes, name="synthetic",
                   source=f"synthetic(seed={seed}, n={num_examples}, k={num_classes}, "
                          f"size={image_size}, noise={noise})",
                   extra_labels={"blob": blob_label})


# --------------------------------------------------------------------------- IDX


def _read_idx(path, magic, ndim_expected):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError("truncated", f"{path}: file shorter than its magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError("bad magic", f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if ndim != ndim_expected or len(raw) < header:
        raise IdxFormatError("truncated", f"{path}: incomplete header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise IdxFormatError("truncated", f"{path}: expected {size} payload bytes, "
                                          f"found {len(raw) - header}")
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, name=None):
    """Read an unsigned-byte IDX image file (3-D) and label file (1-D)."""
    imgs = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if len(imgs) != len(labels):
        raise IdxFormatError("count mismatch", f"{len(imgs)} images but {len(labels)} labels")
    images = imgs.astype(np.float64)[:, None] / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, num_classes, name or Path(images_path).stem,
                   source=f"idx:{images_path}")


def write_idx(dataset: Dataset, images_path, labels_path):
    """Write single-channel images (quantized to bytes) and labels as IDX files."""
    if dataset.images.shape[1] != 1:
        raise ValueError("IDX images are single-channel")
    n, _, h, w = dataset.images.shape
    pix = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------- splitting


def split(dataset: Dataset, val_fraction=1 / 6, seed=0):
    """Seeded, class-stratified train/validation split."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * val_fraction))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return (dataset.subset(train_idx, f"{dataset.name}/train"),
            dataset.subset(val_idx, f"{dataset.name}/val"))
