"""Datasets, open-set class splits and the grayscale augmentation pipeline."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    class_count: int

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.x[mask], self.y[mask], self.class_count)


@dataclass(frozen=True)
class DatasetManifest:
    source: str  # "synthetic-2d" or "idx-files"
    class_count: int
    sample_shape: Tuple[int, ...]
    paths: Tuple[str, ...] = ()
    params: Dict[str, object] = field(default_factory=dict)


# --- synthetic 2-D ------------------------------------------------------------

FOUR_GAUSSIAN_MEANS = ((2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0))


def gen_gaussian_2d(means: Sequence[Sequence[float]] = FOUR_GAUSSIAN_MEANS, sigma: float = 0.4,
                    n_per_class: int = 500, seed: int = 0) -> Dataset:
    means = np.asarray(means, dtype=float)
    if means.ndim != 2 or means.shape[1] != 2 or len(means) < 2:
        raise ValueError("need at least two 2-D class means")
    if sigma <= 0 or n_per_class < 1:
        raise ValueError("sigma must be positive and n_per_class >= 1")
    if len({tuple(m) for m in means}) < len(means):
        log.warning("duplicate class means: the experiment is degenerate")
    rng = np.random.default_rng(seed)
    x = np.concatenate([m + sigma * rng.standard_normal((n_per_class, 2)) for m in means])
    y = np.repeat(np.arange(len(means)), n_per_class)
    return Dataset(x, y, len(means))


# --- IDX files ----------------------------------------------------------------

def _read(path) -> bytes:
    return Path(path).read_bytes()


def _header(buf: bytes, magic: int, ndims: int, path) -> Tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise DataError(f"{path}: truncated header, {len(buf)} bytes at offset 0 (need {need})")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", buf[4:need])


def load_idx(images_path, labels_path) -> Dataset:
    """Images as (N, rows, cols, 1) floats in [0, 1]; labels as int array."""
    ibuf, lbuf = _read(images_path), _read(labels_path)
    n, rows, cols = _header(ibuf, IDX_IMAGES_MAGIC, 3, images_path)
    expect = 16 + n * rows * cols
    if len(ibuf) < expect:
        raise DataError(f"{images_path}: truncated at byte offset {len(ibuf)}, header promises {n} images ending at offset {expect}")
    (nl,) = _header(lbuf, IDX_LABELS_MAGIC, 1, labels_path)
    if len(lbuf) < 8 + nl:
        raise DataError(f"{labels_path}: truncated at byte offset {len(lbuf)}, header promises {nl} labels ending at offset {8 + nl}")
    if nl != n:
        raise DataError(f"count mismatch: {images_path} holds {n} images (offset 4) but {labels_path} holds {nl} labels (offset 4)")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * rows * cols, offset=16)
    x = pixels.reshape(n, rows, cols, 1).astype(np.float64) / 255.0
    y = np.frombuffer(lbuf, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    classes = int(y.max()) + 1 if n else 0
    return Dataset(x, y, classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of ``load_idx``; accepts uint8 arrays or floats in [0, 1]."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[..., 0]
    if images.dtype != np.uint8:
        images = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = images.shape
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_idx_dir(directory, part: str = "train") -> Dataset:
    img, lab = MNIST_FILES[part]
    d = Path(directory)
    if not (d / img).exists() or not (d / lab).exists():
        raise DataError(f"{d}: missing {img} or {lab}")
    return load_idx(d / img, d / lab)


def export_mnist5k(directory, test_fraction: float = 0.2) -> Path:
    """Write the 5,000-digit MNIST subset bundled with mlxtend as IDX files.

    Every class is split in file order: the first ``1 - test_fraction`` go to
    the training files, the rest to the t10k files.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = x.reshape(-1, 28, 28).astype(np.uint8)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        cut = int(round(len(idx) * (1 - test_fraction)))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for part, idx in (("train", np.array(train_idx)), ("test", np.array(test_idx))):
        img, lab = MNIST_FILES[part]
        write_idx(d / img, d / lab, x[idx], y[idx])
    return d


# --- open-set splits ----------------------------------------------------------

MASK64 = (1 << 64) - 1


class SplitMix64:
    """The splitmix64 generator (Steele, Lea & Flood): 64-bit state, golden-gamma increment."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def fisher_yates(n: int, seed: int) -> List[int]:
    """Shuffle [0, n) with splitmix64: for i = n-1..1, swap i with next() mod (i+1)."""
    items = list(range(n))
    rng = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = rng.next() % (i + 1)
        items[i], items[j] = items[j], items[i]
    return items


@dataclass(frozen=True)
class OpenSetSplit:
    known_classes: Tuple[int, ...]
    unknown_classes: Tuple[int, ...]
    trial_seed: int = 0

    def __post_init__(self):
        if not self.known_classes:
            raise ValueError("known classes must be nonempty")
        if set(self.known_classes) & set(self.unknown_classes):
            raise ValueError("known and unknown classes overlap")

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    def remap(self, labels: np.ndarray) -> np.ndarray:
        """Known classes -> 0..m-1 in ``known_classes`` order; anything else -> m."""
        lut = {c: i for i, c in enumerate(self.known_classes)}
        return np.array([lut.get(int(v), self.num_known) for v in labels], dtype=np.int64)

    def known_mask(self, labels: np.ndarray) -> np.ndarray:
        return np.isin(labels, self.known_classes)


def make_open_split(class_count: int, n_known: int, trial_seed: int) -> OpenSetSplit:
    """First ``n_known`` entries of the shuffled class list are known (then sorted)."""
    if not 1 <= n_known < class_count:
        raise ValueError(f"n_known must be in [1, {class_count}), got {n_known}")
    order = fisher_yates(class_count, trial_seed)
    known = tuple(sorted(order[:n_known]))
    unknown = tuple(sorted(order[n_known:]))
    return OpenSetSplit(known, unknown, trial_seed)


def split_from_known(class_count: int, known: Sequence[int], trial_seed: int = 0) -> OpenSetSplit:
    known = tuple(sorted(set(int(k) for k in known)))
    if not known or min(known) < 0 or max(known) >= class_count:
        raise ValueError(f"known classes {known} outside [0, {class_count})")
    return OpenSetSplit(known, tuple(c for c in range(class_count) if c not in known), trial_seed)


# --- augmentation -------------------------------------------------------------

TRANSFORMS = ("brightness", "contrast", "rotate", "shear", "equalize")
DEFAULT_RANGES = {
    "brightness": (-0.3, 0.3),
    "contrast": (0.7, 1.3),
    "rotate": (-30.0, 30.0),
    "shear": (-0.3, 0.3),
    "equalize": (0.0, 0.0),
}


@dataclass(frozen=True)
class AugmentSpec:
    enabled: Tuple[str, ...] = TRANSFORMS
    max_ops: int = 2
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_RANGES))
    seed: int = 0

    def __post_init__(self):
        if self.max_ops < 0:
            raise ValueError("max_ops must be >= 0")
        for name in self.enabled:
            if name not in TRANSFORMS:
                raise ValueError(f"unknown transform {name!r}")
            lo, hi = self.ranges[name]
            if lo > hi:
                raise ValueError(f"bad magnitude range for {name}: {(lo, hi)}")


def _affine_about_center(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Bilinear resampling, output(p) = input(matrix @ (p - c) + c), zero outside."""
    center = (np.array(img.shape) - 1) / 2.0
    offset = center - matrix @ center
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def brightness(img, delta):
    return img + delta


def contrast(img, factor):
    m = img.mean()
    return (img - m) * factor + m


def rotate(img, degrees):
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return _affine_about_center(img, np.array([[c, -s], [s, c]]))


def shear(img, amount):
    return _affine_about_center(img, np.array([[1.0, 0.0], [amount, 1.0]]))


def equalize(img, _unused=None):
    """Histogram equalization over 256 bins."""
    q = np.clip(np.round(img * 255), 0, 255).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    nonzero = cdf[hist > 0]
    cdf_min = nonzero[0]
    total = q.size
    if total == cdf_min:
        return img.copy()
    lut = (cdf - cdf_min) / (total - cdf_min)
    return np.clip(lut[q], 0.0, 1.0)


_OPS = {"brightness": brightness, "contrast": contrast, "rotate": rotate, "shear": shear, "equalize": equalize}


def augment_image(image: np.ndarray, spec: AugmentSpec, draw_seed: int) -> np.ndarray:
    """Apply 0..max_ops distinct transforms sampled in random order; clamp to [0, 1]."""
    img = np.asarray(image, dtype=float)
    squeeze = img.ndim == 3
    plane = img[..., 0] if squeeze else img
    if spec.max_ops == 0:
        return img.copy()
    if not spec.enabled:
        log.warning("augmentation has no enabled transforms; returning the image unchanged")
        return img.copy()
    rng = np.random.default_rng([spec.seed, draw_seed])
    k = int(rng.integers(0, min(spec.max_ops, len(spec.enabled)) + 1))
    chosen = rng.permutation(len(spec.enabled))[:k]
    for i in chosen:
        name = spec.enabled[i]
        lo, hi = spec.ranges[name]
        plane = _OPS[name](plane, rng.uniform(lo, hi))
    plane = np.clip(plane, 0.0, 1.0)
    return plane[..., None] if squeeze else plane


def augment_batch(images: np.ndarray, spec: AugmentSpec, draw_seeds: Sequence[int]) -> np.ndarray:
    return np.stack([augment_image(im, spec, int(s)) for im, s in zip(images, draw_seeds)])
