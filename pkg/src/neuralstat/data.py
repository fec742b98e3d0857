"""Set corpora: the synthetic 1-D families, spatial MNIST, IDX reading and the NSDS container."""
from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import FormatError, Reader

NSDS_MAGIC = b"NSDS"
NSDS_VERSION = 1
LABEL_TAG = b"LBLS"
AFFINE_TAG = b"AFFN"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

LABEL_DTYPE = np.dtype([("label", "<i4"), ("mean", "<f8"), ("variance", "<f8")])


class Family(enum.IntEnum):
    EXPONENTIAL = 0
    GAUSSIAN = 1
    UNIFORM = 2
    LAPLACIAN = 3


@dataclass
class DatasetBatch:
    """``values`` has shape (n_sets, sample_size, n_features).

    ``labels`` is a structured array with fields ``label``, ``mean``, ``variance``
    (family or class id, and the generating moments where they are known).
    ``affine`` holds ``(offset, scale)`` when the values were standardised as
    ``(raw - offset) / scale``.
    """

    values: np.ndarray
    labels: np.ndarray | None = None
    affine: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"DatasetBatch values must be rank 3, got shape {self.values.shape}")
        if self.labels is not None and len(self.labels) != len(self.values):
            raise ValueError(f"{len(self.labels)} labels for {len(self.values)} sets")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def sample_size(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def subset(self, index) -> "DatasetBatch":
        index = np.asarray(index)
        return DatasetBatch(self.values[index],
                            None if self.labels is None else self.labels[index],
                            self.affine)

    def label_ids(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("corpus carries no labels")
        return self.labels["label"].astype(int)

    def to_raw(self, values: np.ndarray) -> np.ndarray:
        """Undo the stored standardisation."""
        if self.affine is None:
            return values
        offset, scale = self.affine
        return values * scale + offset


def make_labels(label, mean=None, variance=None) -> np.ndarray:
    label = np.asarray(label)
    out = np.zeros(len(label), dtype=LABEL_DTYPE)
    out["label"] = label
    out["mean"] = np.nan if mean is None else mean
    out["variance"] = np.nan if variance is None else variance
    return out


# -- synthetic 1-D ----------------------------------------------------------------------------
def sample_family(family: Family, mean: float, variance: float, size, rng: np.random.Generator) -> np.ndarray:
    """Draw from ``family`` parameterised to have exactly the given mean and variance."""
    sd = float(np.sqrt(variance))
    family = Family(family)
    if family is Family.EXPONENTIAL:
        # rate 1/sd, shifted so the mean is `mean`
        return mean - sd + rng.exponential(sd, size)
    if family is Family.GAUSSIAN:
        return rng.normal(mean, sd, size)
    if family is Family.UNIFORM:
        half = 0.5 * np.sqrt(12.0 * variance)
        return rng.uniform(mean - half, mean + half, size)
    return rng.laplace(mean, np.sqrt(variance / 2.0), size)


def family_moments(family: Family, mean: float, variance: float) -> tuple[float, float]:
    """Analytic (mean, variance) of the parameterisation used by :func:`sample_family`."""
    sd = np.sqrt(variance)
    family = Family(family)
    if family is Family.EXPONENTIAL:
        return (mean - sd) + sd, sd ** 2
    if family is Family.GAUSSIAN:
        return mean, sd ** 2
    if family is Family.UNIFORM:
        width = np.sqrt(12.0 * variance)
        lo, hi = mean - width / 2, mean + width / 2
        return (lo + hi) / 2, (hi - lo) ** 2 / 12.0
    b = np.sqrt(variance / 2.0)
    return mean, 2 * b ** 2


def set_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, set index), so sets can be generated in any order."""
    return np.random.default_rng([int(seed), int(index)])


def gen_synthetic_1d(n_sets: int = 10_000, samples_per_set: int = 200, seed: int = 0,
                     start: int = 0) -> DatasetBatch:
    """Sets drawn from a random family with mean ~ U[-1, 1] and variance ~ U[0.5, 2].

    ``start`` offsets the set index used to key each set's stream, so disjoint
    ranges under one seed give disjoint corpora.
    """
    if n_sets < 1 or samples_per_set < 1:
        raise ValueError(f"n_sets and samples_per_set must be >= 1, got {n_sets}, {samples_per_set}")
    values = np.empty((n_sets, samples_per_set, 1))
    labels = np.zeros(n_sets, dtype=LABEL_DTYPE)
    for i in range(n_sets):
        rng = set_rng(seed, start + i)
        fam = int(rng.integers(4))
        m = rng.uniform(-1.0, 1.0)
        v = rng.uniform(0.5, 2.0)
        values[i, :, 0] = sample_family(Family(fam), m, v, samples_per_set, rng)
        labels[i] = (fam, m, v)
    return DatasetBatch(values, labels)


# -- IDX -------------------------------------------------------------------------------------
def parse_idx(buf: bytes, what: str = "IDX") -> np.ndarray:
    r = Reader(buf, what)
    magic = r.u32("magic", ">")
    if magic == IDX_IMAGES_MAGIC:
        dims = tuple(r.u32(f"extent {i}", ">") for i in range(3))
    elif magic == IDX_LABELS_MAGIC:
        dims = (r.u32("extent 0", ">"),)
    else:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x} "
                          f"(images) or 0x{IDX_LABELS_MAGIC:08x} (labels)")
    expected = int(np.prod(dims))
    if r.remaining < expected:
        raise FormatError(f"{what}: truncated payload: expected {expected} bytes, got {r.remaining}")
    out = np.frombuffer(r.take(expected, "payload"), dtype=np.uint8).reshape(dims)
    if r.remaining:
        raise FormatError(f"{what}: {r.remaining} trailing bytes after a payload of {expected}")
    return out


def load_idx(path) -> np.ndarray:
    """Images as (count, rows, cols) uint8, or labels as (count,) uint8, untransformed."""
    path = Path(path)
    return parse_idx(path.read_bytes(), f"IDX file {path.name}")


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    if array.ndim not in (1, 3):
        raise ValueError(f"IDX writer supports rank 1 or 3, got {array.ndim}")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# -- spatial MNIST ---------------------------------------------------------------------------------
@dataclass
class SpatialSet:
    points: np.ndarray  # (n_points, 2) as (x, y) in [0, cols) x [0, rows)
    label: int = -1


def spatial_from_image(image: np.ndarray, n_points: int = 50, rng: np.random.Generator | None = None,
                       label: int = -1) -> SpatialSet:
    """Sample pixel indices with probability proportional to intensity, then dequantise.

    Each point is (col + u1, row + u2) with independent u ~ U[0, 1).
    """
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    rng = rng if rng is not None else np.random.default_rng()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a (rows, cols) image, got shape {image.shape}")
    if np.any(image < 0):
        raise ValueError("image intensities must be non-negative")
    total = image.sum()
    if not total > 0:
        raise ValueError("image has no positive intensity")
    rows, cols = image.shape
    flat = rng.choice(rows * cols, size=n_points, replace=True, p=image.reshape(-1) / total)
    row, col = np.divmod(flat, cols)
    u = rng.random((n_points, 2))
    return SpatialSet(np.stack([col + u[:, 0], row + u[:, 1]], axis=1), label)


def gen_spatial_mnist(images: np.ndarray, labels: np.ndarray | None = None, n_points: int = 50,
                      seed: int = 0, affine: tuple[np.ndarray, np.ndarray] | None = None,
                      start: int = 0) -> DatasetBatch:
    """One dequantised point set per image, standardised by an affine map.

    Without ``affine``, the map is the per-coordinate mean and standard deviation
    over the generated points; pass a training corpus's map for held-out data.
    """
    values = np.empty((len(images), n_points, 2))
    for i, img in enumerate(images):
        values[i] = spatial_from_image(img, n_points, set_rng(seed, start + i)).points
    if affine is None:
        flat = values.reshape(-1, 2)
        affine = (flat.mean(axis=0), flat.std(axis=0))
    offset, scale = (np.asarray(a, dtype=np.float64) for a in affine)
    values = (values - offset) / scale
    lab = None if labels is None else make_labels(np.asarray(labels, dtype=int))
    return DatasetBatch(values, lab, (offset, scale))


# -- NSDS container ------------------------------------------------------------------------------
def sets_to_bytes(batch: DatasetBatch) -> bytes:
    n, s, f = batch.values.shape
    chunks = [NSDS_MAGIC, struct.pack("<IIII", NSDS_VERSION, n, s, f),
              np.ascontiguousarray(batch.values, dtype="<f4").tobytes()]
    if batch.labels is not None:
        labels = np.asarray(batch.labels, dtype=LABEL_DTYPE)
        chunks += [LABEL_TAG, struct.pack("<I", n), labels.tobytes()]
    if batch.affine is not None:
        offset, scale = batch.affine
        chunks += [AFFINE_TAG, struct.pack("<I", f),
                   np.asarray(offset, dtype="<f8").tobytes(), np.asarray(scale, dtype="<f8").tobytes()]
    return b"".join(chunks)


def sets_from_bytes(buf: bytes, what: str = "NSDS") -> DatasetBatch:
    r = Reader(buf, what)
    r.magic(NSDS_MAGIC)
    version = r.u32("version")
    if version != NSDS_VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    n, s, f = r.u32("n_sets"), r.u32("sample_size"), r.u32("n_features")
    values = np.frombuffer(r.take(4 * n * s * f, "values"), dtype="<f4").reshape(n, s, f)
    labels = affine = None
    while r.remaining:
        tag = r.take(4, "block tag")
        if tag == LABEL_TAG:
            count = r.u32("label count")
            if count != n:
                raise FormatError(f"{what}: label block has {count} entries for {n} sets")
            labels = np.frombuffer(r.take(LABEL_DTYPE.itemsize * count, "labels"), dtype=LABEL_DTYPE).copy()
        elif tag == AFFINE_TAG:
            dim = r.u32("affine dimension")
            if dim != f:
                raise FormatError(f"{what}: affine block has dimension {dim} for {f} features")
            offset = np.frombuffer(r.take(8 * dim, "affine offset"), dtype="<f8").copy()
            scale = np.frombuffer(r.take(8 * dim, "affine scale"), dtype="<f8").copy()
            affine = (offset, scale)
        else:
            raise FormatError(f"{what}: unknown block tag {tag!r}")
    return DatasetBatch(values.astype(np.float64), labels, affine)


def save_sets(path, batch: DatasetBatch) -> None:
    Path(path).write_bytes(sets_to_bytes(batch))


def load_sets(path) -> DatasetBatch:
    path = Path(path)
    return sets_from_bytes(path.read_bytes(), f"NSDS file {path.name}")


def nsds_size(n_sets: int, sample_size: int, n_features: int, labels: bool = False,
              affine: bool = False) -> int:
    """Byte size of an NSDS file with the given shape and optional blocks."""
    size = 20 + 4 * n_sets * sample_size * n_features
    if labels:
        size += 8 + LABEL_DTYPE.itemsize * n_sets
    if affine:
        size += 8 + 16 * n_features
    return size


def write_label_csv(path, batch: DatasetBatch) -> None:
    """Sidecar ``set_id,family,mean,variance``; family is the integer label (the Family id for 1-D sets)."""
    if batch.labels is None:
        raise ValueError("corpus carries no labels")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set_id", "family", "mean", "variance"])
        for i, row in enumerate(batch.labels):
            w.writerow([i, int(row["label"]), repr(float(row["mean"])), repr(float(row["variance"]))])
