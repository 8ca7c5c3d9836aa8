"""Synthetic datasets and small file loaders (CSV, IDX)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray   # (n, d) float64
    labels: np.ndarray     # (n,) int64
    n_classes: int
    name: str = ""
    seed: int | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InputError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        if self.ids is None:
            self.ids = np.arange(self.n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.name,
                       self.seed, self.ids[idx])

    def equals(self, other: "Dataset") -> bool:
        return (self.n_classes == other.n_classes
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes()
                and self.labels.tobytes() == other.labels.tobytes()
                and self.ids.tobytes() == other.ids.tobytes())


def gen_blobs(seed: int, K: int = 3, n_per_class: int = 200, dim: int = 2,
              spread: float = 1.0, center_scale: float = 3.0) -> Dataset:
    """K isotropic Gaussian clusters around centers drawn from N(0, center_scale^2)."""
    if K < 2 or dim < 1 or n_per_class < 1:
        raise ParameterError("need K >= 2, dim >= 1 and n_per_class >= 1")
    if not spread > 0:
        raise ParameterError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(K, dim))
    labels = np.repeat(np.arange(K), n_per_class)
    X = centers[labels] + spread * rng.normal(size=(labels.size, dim))
    return Dataset(X, labels, K, "blobs", seed)


def spiral_point(k: int, K: int, r: float, turns: float) -> np.ndarray:
    """Noise-free position at radius r on arm k."""
    theta = 2 * np.pi * k / K + 2 * np.pi * turns * r
    return np.array([r * np.cos(theta), r * np.sin(theta)])


def gen_spirals(seed: int, K: int = 3, n_per_class: int = 100, noise: float = 0.1,
                turns: float = 1.0) -> Dataset:
    """
    K interleaved 2-D spiral arms. Arm k at radius r in (0, 1] has angle
    2*pi*k/K + 2*pi*turns*r; Gaussian noise of std ``noise`` is added to
    both coordinates.
    """
    if K < 2 or n_per_class < 1:
        raise ParameterError("need K >= 2 and n_per_class >= 1")
    if noise < 0:
        raise ParameterError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(K), n_per_class)
    r = rng.uniform(0.05, 1.0, size=labels.size)
    theta = 2 * np.pi * labels / K + 2 * np.pi * turns * r
    X = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    X = X + noise * rng.normal(size=X.shape)
    return Dataset(X, labels, K, "spirals", seed)


# --- CSV ---------------------------------------------------------------------

def save_csv(dataset: Dataset, path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        f.write(",".join(["label"] + [f"f{j}" for j in range(dataset.dim)]) + "\n")
        for y, row in zip(dataset.labels, dataset.features):
            f.write(",".join([str(int(y))] + [repr(float(v)) for v in row]) + "\n")
    return path


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """
    Read ``label,f0,f1,...`` rows. ``n_classes`` defaults to max(label) + 1;
    when given, larger labels raise InputError.
    """
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    offset = 0
    header = lines[0].decode().strip().split(",") if lines else []
    if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
        raise FormatError(f"expected header 'label,f0,f1,...', got {lines[0][:60]!r}", 0)
    d = len(header) - 1
    offset += len(lines[0]) + 1
    labels, rows = [], []
    for line in lines[1:]:
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        parts = line.decode().strip().split(",")
        if len(parts) != d + 1:
            raise FormatError(f"row {len(labels) + 1} has {len(parts)} fields, expected {d + 1}", start)
        try:
            labels.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"row {len(labels) + 1}: {exc}", start) from None
    labels = np.array(labels, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise InputError("negative label")
    K = int(labels.max()) + 1 if n_classes is None else n_classes
    if labels.size and labels.max() >= K:
        raise InputError(f"label {int(labels.max())} out of range for {K} classes")
    X = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return Dataset(X, labels, max(K, 2), Path(path).stem)


# --- IDX ---------------------------------------------------------------------

def _read_idx(path, magic: int, ndim: int):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated magic", len(raw))
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise FormatError(f"{path}: magic {found:#010x}, expected {magic:#010x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header", len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(f"{path}: expected {size} data bytes, file ends early", len(raw))
    if len(raw) > header + size:
        raise FormatError(f"{path}: trailing bytes after data", header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """IDX image/label pair (MNIST layout); pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    K = int(labels.max()) + 1 if n_classes is None else n_classes
    if labels.size and labels.max() >= K:
        raise InputError(f"label {int(labels.max())} out of range for {K} classes")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels, max(K, 2), Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# --- preprocessing -----------------------------------------------------------

def split_train_val(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random split; the validation set gets round(n * val_fraction) examples."""
    if not 0.0 <= val_fraction < 1.0:
        raise ParameterError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    n_val = int(round(dataset.n * val_fraction))
    perm = np.random.default_rng([seed, 1]).permutation(dataset.n)
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std
