"""Paired HSI/LiDAR datasets: binary file format, normalization, splits, synthetic data."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .network import ConfigurationError

DATASET_MAGIC = b"SMDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


class DatasetFormatError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    hsi: np.ndarray
    lidar: np.ndarray
    labels: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.hsi = np.asarray(self.hsi, dtype=np.float64)
        self.lidar = np.asarray(self.lidar, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        n = self.hsi.shape[0]
        if self.lidar.shape[0] != n or self.labels.shape[0] != n:
            raise DataError(f"row counts differ: hsi {self.hsi.shape[0]}, "
                            f"lidar {self.lidar.shape[0]}, labels {self.labels.shape[0]}")

    def __len__(self) -> int:
        return self.hsi.shape[0]

    @property
    def m(self) -> int:
        return self.labels.shape[1]

    @property
    def d_hsi(self) -> int:
        return self.hsi.shape[1]

    @property
    def d_lidar(self) -> int:
        return self.lidar.shape[1]

    @property
    def class_index(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.hsi[idx], self.lidar[idx], self.labels[idx], list(self.names))


def one_hot(index: Sequence[int], m: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((index.size, m))
    out[np.arange(index.size), index] = 1.0
    return out


def _validate_labels(labels: np.ndarray) -> None:
    for i, row in enumerate(labels):
        if not (np.all((row == 0) | (row == 1)) and row.sum() == 1):
            raise DataError(f"label row {i} is not one-hot")


# -- binary format ---------------------------------------------------------

def dataset_bytes(ds: Dataset) -> bytes:
    n, m = len(ds), ds.m
    parts = [
        _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, ds.d_hsi, ds.d_lidar, m),
        np.ascontiguousarray(ds.hsi, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.lidar, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes(),
    ]
    names = ds.names if ds.names else []
    if names and len(names) != m:
        raise DataError(f"{len(names)} class names for {m} classes")
    for name in names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(parts)


def save_dataset(path, ds: Dataset) -> None:
    from .harness import atomic_write_bytes

    atomic_write_bytes(path, dataset_bytes(ds))


def parse_dataset(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: {len(blob)} bytes, need {_HEADER.size}")
    magic, version, n, d_hsi, d_lidar, m = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at byte 0")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version} at byte 4")
    if n == 0:
        raise DatasetFormatError("dataset declares N=0 samples at byte 6")
    if m == 0:
        raise DatasetFormatError("dataset declares m=0 classes at byte 18")
    pos = _HEADER.size

    def take(count: int, dtype: str, what: str) -> np.ndarray:
        nonlocal pos
        size = count * np.dtype(dtype).itemsize
        if pos + size > len(blob):
            raise DatasetFormatError(f"truncated {what} at byte {pos}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
        pos += size
        return arr

    hsi = take(n * d_hsi, "<f4", "HSI block").reshape(n, d_hsi).astype(np.float64)
    lidar = take(n * d_lidar, "<f4", "LiDAR block").reshape(n, d_lidar).astype(np.float64)
    labels = take(n * m, "u1", "labels").reshape(n, m).astype(np.float64)
    names: list[str] = []
    if pos < len(blob):
        for i in range(m):
            if pos + 2 > len(blob):
                raise DatasetFormatError(f"truncated class name {i} length at byte {pos}")
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            if pos + ln > len(blob):
                raise DatasetFormatError(f"truncated class name {i} at byte {pos}")
            names.append(blob[pos:pos + ln].decode("utf-8"))
            pos += ln
    if pos != len(blob):
        raise DatasetFormatError(f"trailing bytes at byte {pos}")
    if not (np.all(np.isfinite(hsi)) and np.all(np.isfinite(lidar))):
        raise DataError("dataset contains non-finite feature values")
    _validate_labels(labels)
    return Dataset(hsi, lidar, labels, names)


def load_dataset(path) -> Dataset:
    """Read a dataset file; raw feature values are kept as stored."""
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


def convert_csv(hsi_csv, lidar_csv, labels_csv, out_path, names_csv=None) -> Dataset:
    """Build a dataset file from two feature CSVs and a label CSV.

    The label file holds one label per row: either a 0-based integer class
    index or a class name (names are indexed in order of first appearance).
    Header rows are skipped when the first cell is not numeric.
    """
    hsi = _read_matrix(hsi_csv)
    lidar = _read_matrix(lidar_csv)
    raw = [r[0].strip() for r in _read_rows(labels_csv) if r]
    if raw and not _is_number(raw[0]) and len(raw) == len(hsi) + 1:
        raw = raw[1:]
    if all(_is_int(v) for v in raw):
        idx = [int(v) for v in raw]
        m = max(idx) + 1
        names: list[str] = []
    else:
        names = list(dict.fromkeys(raw))
        idx = [names.index(v) for v in raw]
        m = len(names)
    if names_csv is not None:
        names = [r[0] for r in _read_rows(names_csv) if r]
        m = max(m, len(names))
    ds = Dataset(hsi, lidar, one_hot(idx, m), names)
    save_dataset(out_path, ds)
    return ds


def _read_rows(path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def _read_matrix(path) -> np.ndarray:
    rows = [r for r in _read_rows(path) if r]
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    try:
        return np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric feature value ({exc})") from exc


# -- normalization & splitting ---------------------------------------------

@dataclass
class MinMax:
    lo: np.ndarray
    hi: np.ndarray

    def apply(self, x: np.ndarray, clip: bool = False) -> np.ndarray:
        span = self.hi - self.lo
        live = span > 0
        out = np.where(live, (x - self.lo) / np.where(live, span, 1.0), 0.0)
        return np.clip(out, 0.0, 1.0) if clip else out

    def invert(self, y: np.ndarray) -> np.ndarray:
        return np.where(self.hi > self.lo, y * (self.hi - self.lo) + self.lo, self.lo)


def normalize_minmax(x: np.ndarray) -> tuple[np.ndarray, MinMax]:
    """Per-column (x - min) / (max - min); constant columns become 0."""
    x = np.asarray(x, dtype=np.float64)
    stats = MinMax(x.min(axis=0, keepdims=True), x.max(axis=0, keepdims=True))
    return stats.apply(x), stats


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    n = len(ds)
    f = spec.train_fraction
    if not 0.0 < f < 1.0:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {f}")
    rng = np.random.Generator(np.random.Philox(key=int(spec.seed)))
    if spec.stratified:
        train_idx, test_idx = [], []
        cls = ds.class_index
        for c in range(ds.m):
            members = np.flatnonzero(cls == c)
            if members.size == 0:
                continue
            members = members[rng.permutation(members.size)]
            k = int(round(f * members.size))
            if members.size >= 2:
                k = min(max(k, 1), members.size - 1)
            train_idx.append(members[:k])
            test_idx.append(members[k:])
        train = np.sort(np.concatenate(train_idx))
        test = np.sort(np.concatenate(test_idx))
    else:
        order = rng.permutation(n)
        k = int(round(f * n))
        train, test = np.sort(order[:k]), np.sort(order[k:])
    if train.size == 0 or test.size == 0:
        raise ConfigurationError(
            f"split of N={n} at fraction {f} leaves an empty partition")
    return ds.subset(train), ds.subset(test)


def normalize_split(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Min-max both partitions with statistics from ``train`` only.

    Test values falling outside the train range are clipped into [0, 1].
    """
    h, hs = normalize_minmax(train.hsi)
    l, ls = normalize_minmax(train.lidar)
    return (Dataset(h, l, train.labels, train.names),
            Dataset(hs.apply(test.hsi, clip=True), ls.apply(test.lidar, clip=True),
                    test.labels, test.names))


def batch_iter(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Yield index arrays of one shuffled epoch.

    The final short batch is kept; a trailing batch of one sample is merged
    into its predecessor so batch norm always sees N >= 2.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    n = len(ds)
    order = np.random.Generator(np.random.Philox(key=int(seed) ^ int(epoch))).permutation(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for i, s in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else n
        yield order[s:end]


# -- synthetic data --------------------------------------------------------

def _embedding(rng: np.random.Generator, d: int, r: int) -> np.ndarray:
    """d x r map with orthonormal columns built from smooth spectral bumps."""
    grid = np.linspace(0.0, 1.0, d)[:, None]
    centers = rng.uniform(0.0, 1.0, r)[None, :]
    widths = rng.uniform(0.05, 0.3, r)[None, :]
    basis = np.exp(-0.5 * ((grid - centers) / widths) ** 2) + 0.3 * rng.standard_normal((d, r))
    if d >= r:
        q, _ = np.linalg.qr(basis)
        return q
    return basis / np.linalg.norm(basis, axis=0, keepdims=True)


def synth_generate(m: int, n_per_class: int, d_hsi: int = 144, d_lidar: int = 21,
                   class_separation: float = 1.75, seed: int = 0, correlation: float = 0.5,
                   lidar_strength: float = 0.8, sensor_noise: float = 0.05,
                   nuisance_dims: int = 4, nuisance_scale: float = 3.0) -> Dataset:
    """Class-conditional Gaussian stand-in for a paired HSI/LiDAR scene.

    Each class owns a vertex of a regular simplex in an m-dimensional latent
    space; vertices are ``2 * class_separation`` apart, so the margin to any
    pairwise decision boundary is ``class_separation`` latent standard
    deviations. HSI observes its latent point through a smooth orthonormal
    spectral embedding. The LiDAR latent mixes the HSI anchor with a
    class-permuted anchor and mixes the HSI latent noise with fresh noise, both
    by ``correlation``; its anchor spacing is scaled by ``lidar_strength`` so
    LiDAR alone is the weaker modality. Each modality also carries
    ``nuisance_dims`` class-independent latent factors with standard deviation
    ``nuisance_scale`` (illumination/terrain-like variation that dominates the
    reconstruction error but says nothing about the class). Features are
    min-max normalized and rounded to float32.
    """
    if min(m, n_per_class, d_hsi, d_lidar) < 1:
        raise ConfigurationError("synth_generate counts must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    simplex = (np.eye(m) - 1.0 / m) * (class_separation * math.sqrt(2.0))
    perm = rng.permutation(m)
    rho = float(correlation)
    mix = math.sqrt(max(0.0, 1.0 - rho * rho))
    lidar_anchor = lidar_strength * (rho * simplex + mix * simplex[perm])

    labels = np.repeat(np.arange(m), n_per_class)
    n = labels.size
    eps_h = rng.standard_normal((n, m))
    eps_l = rho * eps_h + mix * rng.standard_normal((n, m))
    z_h = np.hstack([simplex[labels] + eps_h,
                     nuisance_scale * rng.standard_normal((n, nuisance_dims))])
    z_l = np.hstack([lidar_anchor[labels] + eps_l,
                     nuisance_scale * rng.standard_normal((n, nuisance_dims))])

    a_h = _embedding(rng, d_hsi, m + nuisance_dims)
    a_l = _embedding(rng, d_lidar, m + nuisance_dims)
    hsi = z_h @ a_h.T + sensor_noise * rng.standard_normal((n, d_hsi))
    lidar = z_l @ a_l.T + sensor_noise * rng.standard_normal((n, d_lidar))

    hsi = normalize_minmax(hsi)[0].astype(np.float32).astype(np.float64)
    lidar = normalize_minmax(lidar)[0].astype(np.float32).astype(np.float64)
    names = [f"class_{c}" for c in range(m)]
    return Dataset(hsi, lidar, one_hot(labels, m), names)


def nearest_centroid_accuracy(train: Dataset, test: Dataset, modality: str = "hsi") -> float:
    """Accuracy of a Euclidean nearest-class-mean rule fitted on ``train``."""
    xs = {"hsi": (train.hsi, test.hsi), "lidar": (train.lidar, test.lidar),
          "both": (np.hstack([train.hsi, train.lidar]), np.hstack([test.hsi, test.lidar]))}
    xtr, xte = xs[modality]
    ytr = train.class_index
    cents = np.stack([xtr[ytr == c].mean(axis=0) if np.any(ytr == c) else np.full(xtr.shape[1], np.inf)
                      for c in range(train.m)])
    d2 = ((xte[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == test.class_index))

