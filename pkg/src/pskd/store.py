"""
Where the epoch t-1 teacher predictions come from.

Two interchangeable sources:

* ``SnapshotTeacher`` keeps a frozen copy of the parameters at the end of
  epoch t-1 and recomputes predictions on demand.
* ``DiskTeacher`` reads a ``PredictionCache`` persisted at the end of
  epoch t-1.

With augmentation the two would differ (the cache stores predictions for
the view seen at t-1, the snapshot re-predicts on the view at t). This
package has no augmentation, and the two are bit-identical.

Cache file layout, little-endian::

    offset  size  field
    0       4     magic b"PSKD"
    4       4     u32 format version (1)
    8       4     u32 epoch
    12      4     u32 padding (0), aligns the next field
    16      8     u64 n_examples
    24      4     u32 n_classes
    28      4     u32 reserved (0)
    32      ...   n_examples records of u64 example_id + n_classes f64
    end-8   8     u64 FNV-1a 64 of every preceding byte
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import CacheMissError, FormatError, InputError, NoTeacherError, ShapeError
from .nn import MLP, forward, freeze, softmax
from .targets import is_simplex

MAGIC = b"PSKD"
VERSION = 1
HEADER = struct.Struct("<4sIIIQII")
HEADER_SIZE = HEADER.size  # 32
CHECKSUM_SIZE = 8

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class PredictionCache:
    """Per-example probability rows for one epoch, keyed by stable example id."""

    def __init__(self, ids, n_classes: int, epoch: int = 0):
        self.ids = np.asarray(ids, dtype=np.uint64).copy()
        if self.ids.ndim != 1:
            raise ShapeError("ids must be a 1-D array")
        self.n_classes = int(n_classes)
        self.epoch = int(epoch)
        self._index = {int(i): k for k, i in enumerate(self.ids)}
        if len(self._index) != self.ids.size:
            raise InputError("duplicate example ids")
        self.probs = np.zeros((self.ids.size, self.n_classes))
        self.filled = np.zeros(self.ids.size, dtype=bool)

    @property
    def n_examples(self) -> int:
        return int(self.ids.size)

    @property
    def complete(self) -> bool:
        return bool(self.filled.all())

    def _row(self, example_id) -> int:
        try:
            return self._index[int(example_id)]
        except KeyError:
            raise InputError(f"example id {example_id} is not part of this dataset") from None

    def record(self, example_id, probs) -> "PredictionCache":
        """Store one row; re-recording the same id overwrites it."""
        p = np.asarray(probs, dtype=np.float64)
        if p.shape != (self.n_classes,):
            raise ShapeError(f"expected {self.n_classes} probabilities, got shape {p.shape}")
        if not is_simplex(p):
            raise InputError(f"prediction for id {example_id} is not a probability vector")
        k = self._row(example_id)
        self.probs[k] = p
        self.filled[k] = True
        return self

    def record_batch(self, example_ids, probs) -> "PredictionCache":
        P = np.asarray(probs, dtype=np.float64)
        ids = np.asarray(example_ids)
        if P.shape != (ids.size, self.n_classes):
            raise ShapeError(f"expected {(ids.size, self.n_classes)} probabilities, got {P.shape}")
        if not is_simplex(P):
            raise InputError("batch contains rows that are not probability vectors")
        rows = np.array([self._row(i) for i in ids], dtype=np.int64)
        self.probs[rows] = P
        self.filled[rows] = True
        return self

    def fetch(self, example_id) -> np.ndarray:
        k = self._index.get(int(example_id))
        if k is None or not self.filled[k]:
            raise CacheMissError(f"no prediction recorded for example id {example_id} (epoch {self.epoch})")
        return self.probs[k].copy()

    def fetch_batch(self, example_ids) -> np.ndarray:
        rows = []
        for i in np.asarray(example_ids):
            k = self._index.get(int(i))
            if k is None or not self.filled[k]:
                raise CacheMissError(f"no prediction recorded for example id {i} (epoch {self.epoch})")
            rows.append(k)
        return self.probs[np.array(rows, dtype=np.int64)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PredictionCache):
            return NotImplemented
        return (self.epoch == other.epoch and self.n_classes == other.n_classes
                and self.ids.tobytes() == other.ids.tobytes()
                and self.filled.tobytes() == other.filled.tobytes()
                and self.probs.tobytes() == other.probs.tobytes())

    def to_bytes(self) -> bytes:
        if not self.complete:
            missing = self.ids[~self.filled][:5].tolist()
            raise InputError(f"cache incomplete; missing ids such as {missing}")
        rec = np.empty(self.n_examples, dtype=_record_dtype(self.n_classes))
        rec["id"] = self.ids
        rec["p"] = self.probs
        body = HEADER.pack(MAGIC, VERSION, self.epoch, 0, self.n_examples, self.n_classes, 0) + rec.tobytes()
        return body + struct.pack("<Q", fnv1a64(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "PredictionCache":
        size = len(data)
        if size >= 4 and data[:4] != MAGIC:
            raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
        if size < HEADER_SIZE + CHECKSUM_SIZE:
            raise FormatError(f"file truncated: {size} bytes is shorter than header plus checksum", size)
        magic, version, epoch, pad, n, K, reserved = HEADER.unpack_from(data, 0)
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}", 4)
        if pad != 0:
            raise FormatError("nonzero padding in header", 12)
        if K < 1:
            raise FormatError("n_classes must be positive", 24)
        if reserved != 0:
            raise FormatError("nonzero reserved field in header", 28)
        rec_size = 8 + 8 * K
        expected = HEADER_SIZE + n * rec_size + CHECKSUM_SIZE
        if size < expected:
            raise FormatError(f"file truncated: expected {expected} bytes for {n} records, got {size}", size)
        if size > expected:
            raise FormatError(f"{size - expected} unexpected trailing bytes", expected)
        (stored,) = struct.unpack_from("<Q", data, size - CHECKSUM_SIZE)
        actual = fnv1a64(data[:size - CHECKSUM_SIZE])
        if stored != actual:
            raise FormatError(f"checksum mismatch: stored {stored:#018x}, computed {actual:#018x}",
                              size - CHECKSUM_SIZE)
        rec = np.frombuffer(data, dtype=_record_dtype(K), count=n, offset=HEADER_SIZE)
        ids = rec["id"]
        uniq, first = np.unique(ids, return_index=True)
        if uniq.size != n:
            dup = np.setdiff1d(np.arange(n), first)[0]
            raise FormatError(f"duplicate example id {int(ids[dup])}", HEADER_SIZE + int(dup) * rec_size)
        cache = cls(ids, K, epoch)
        cache.probs[:] = rec["p"].reshape(n, K)
        cache.filled[:] = True
        return cache


def _record_dtype(K: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("p", "<f8", (K,))])


def persist(cache: PredictionCache, path) -> Path:
    path = Path(path)
    path.write_bytes(cache.to_bytes())
    return path


def load(path) -> PredictionCache:
    return PredictionCache.from_bytes(Path(path).read_bytes())


# --- teacher sources --------------------------------------------------------

@dataclass(frozen=True)
class SnapshotTeacher:
    params: MLP
    epoch: int = 0


@dataclass(frozen=True)
class DiskTeacher:
    path: Path
    cache: PredictionCache

    @property
    def epoch(self) -> int:
        return self.cache.epoch


TeacherSource = Union[SnapshotTeacher, DiskTeacher]


def snapshot_teacher(params: MLP, epoch: int = 0) -> SnapshotTeacher:
    """Frozen deep copy of ``params``; later optimizer steps cannot reach it."""
    return SnapshotTeacher(freeze(params), epoch)


def disk_teacher(path) -> DiskTeacher:
    cache = load(path)
    return DiskTeacher(Path(path), cache)


def teacher_predict(source: TeacherSource | None, example_id, x) -> np.ndarray:
    """Teacher probabilities for one example (``x`` is its input row)."""
    return teacher_predict_batch(source, [example_id], np.asarray(x, dtype=np.float64).reshape(1, -1))[0]


def teacher_predict_batch(source: TeacherSource | None, example_ids, X) -> np.ndarray:
    if source is None:
        raise NoTeacherError("no teacher before the first epoch has finished")
    if isinstance(source, SnapshotTeacher):
        return softmax(forward(source.params, X))
    if isinstance(source, DiskTeacher):
        if not source.cache.complete:
            raise CacheMissError(f"prediction cache {source.path} is incomplete")
        return source.cache.fetch_batch(example_ids)
    raise TypeError(f"unknown teacher source {type(source).__name__}")
