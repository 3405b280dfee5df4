"""Dataset generation and IDX (MNIST-format) ingestion."""
from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagic, TruncatedFile
from .objectives import Dataset

TOY_NOISE_STD = 0.05
TOY_CLUSTERS = ((-1.0, -0.35), (0.35, 1.0))
TOY_TEST_RANGE = (-1.5, 1.5)

IDX_IMAGES, IDX_LABELS = 0x00000803, 0x00000801


def toy_function(x):
    return np.sin(4.0 * x) + 0.1 * x


def gen_toy_regression(seed, n_train, n_test):
    """Two-cluster 1-d sinusoid with a gap at the origin and a wider test grid.

    Returns ``(train, test)``; test inputs form a uniform grid over
    [-1.5, 1.5] with noisy targets drawn from the same generator.
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    rng = np.random.default_rng(seed)
    cluster = rng.integers(0, 2, size=n_train)
    lo = np.array([c[0] for c in TOY_CLUSTERS])[cluster]
    hi = np.array([c[1] for c in TOY_CLUSTERS])[cluster]
    x = lo + (hi - lo) * rng.random(n_train)
    y = toy_function(x) + TOY_NOISE_STD * rng.standard_normal(n_train)
    xt = np.linspace(*TOY_TEST_RANGE, n_test)
    yt = toy_function(xt) + TOY_NOISE_STD * rng.standard_normal(n_test)
    return Dataset(x[:, None], y[:, None]), Dataset(xt[:, None], yt[:, None])


def write_idx(path, array, magic=None):
    """Write an unsigned-byte IDX file (3-d arrays as images, 1-d as labels)."""
    array = np.asarray(array)
    if magic is None:
        magic = IDX_IMAGES if array.ndim == 3 else IDX_LABELS
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", n) for n in array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def read_idx(path, kind=None):
    """Parse an unsigned-byte IDX file.

    Images (magic 0x803) come back as float64 in [0, 1] with shape
    (count, rows, cols); labels (0x801) as int64 of shape (count,).
    ``kind`` ("images"/"labels") additionally enforces the expected magic.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    expected = {"images": IDX_IMAGES, "labels": IDX_LABELS}.get(kind)
    if magic not in (IDX_IMAGES, IDX_LABELS) or (expected is not None and magic != expected):
        raise BadMagic(f"{path}: unexpected magic 0x{magic:08x}")
    ndim = 3 if magic == IDX_IMAGES else 1
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFile(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise TruncatedFile(f"{path}: expected {n} payload bytes, found {len(raw) - head}")
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)
    if magic == IDX_IMAGES:
        return data.astype(np.float64) / 255.0
    return data.astype(np.int64)


def downsample2(images):
    """2x2 average pooling (odd trailing rows/cols are dropped)."""
    n, r, c = images.shape
    r2, c2 = r // 2, c // 2
    im = images[:, :2 * r2, :2 * c2]
    return im.reshape(n, r2, 2, c2, 2).mean(axis=(2, 4))


def load_idx_pair(images_path, labels_path, classes=None, downsample=False, limit=None):
    """Flattened images and labels remapped to 0..C-1 for the selected classes."""
    images = read_idx(images_path, kind="images")
    labels = read_idx(labels_path, kind="labels")
    if len(images) != len(labels):
        raise ValueError("image and label counts differ")
    if downsample:
        images = downsample2(images)
    if classes is not None:
        classes = list(classes)
        keep = np.isin(labels, classes)
        images, labels = images[keep], labels[keep]
        labels = np.searchsorted(np.array(sorted(classes)), labels)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images.reshape(len(images), -1), labels)
