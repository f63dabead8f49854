"""Cached feature datasets: binary file format and synthetic generation.

File format ("ATNF", little-endian):

    magic        4 bytes  b"ATNF"
    version      u32      1
    n_records    u64
    height       u32
    width        u32
    channels     u32
    n_categories u32
    records      n_records x (category_id u32, split u8,
                              height*width*channels float32 values)

Split codes: 0 train, 1 val, 2 test.  Feature vectors are flattened
height-major, then width, then channel (channel varies fastest).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ATNF"
VERSION = 1
_HEADER = struct.Struct("<4sIQIIII")

SPLIT_NAMES = ("train", "val", "test")
SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}


class FeatureFileError(ValueError):
    """Malformed or inconsistent feature file."""


@dataclass(frozen=True)
class FeatureShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        for name in ("height", "width", "channels"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def flat_dim(self) -> int:
        return self.height * self.width * self.channels


@dataclass
class FeatureRecord:
    record_index: int
    category_id: int
    split: str
    features: np.ndarray  # float32, (flat_dim,)


class Dataset:
    """Immutable-after-load collection of feature records.

    Records live in parallel arrays (category ids, split codes, one
    float32 feature row per record); ``record(i)`` materialises a
    :class:`FeatureRecord` view on demand.
    """

    def __init__(self, shape, n_categories, category_ids, splits, features,
                 category_names=None):
        self.shape = shape
        self.n_categories = int(n_categories)
        self.category_ids = np.asarray(category_ids, dtype=np.int64)
        self.splits = np.asarray(splits, dtype=np.uint8)
        self.features = np.ascontiguousarray(features, dtype=np.float32)
        self.category_names = list(category_names) if category_names else None
        self.validate(check_splits=False)

    @property
    def n_records(self) -> int:
        return self.features.shape[0]

    def record(self, i: int) -> FeatureRecord:
        return FeatureRecord(
            record_index=i,
            category_id=int(self.category_ids[i]),
            split=SPLIT_NAMES[self.splits[i]],
            features=self.features[i],
        )

    def iter_records(self):
        for i in range(self.n_records):
            yield self.record(i)

    def indices(self, split=None, categories=None) -> np.ndarray:
        """Record indices matching a split name and/or a category set."""
        keep = np.ones(self.n_records, dtype=bool)
        if split is not None:
            keep &= self.splits == SPLIT_CODES[split]
        if categories is not None:
            cats = np.asarray(sorted(categories), dtype=np.int64)
            keep &= np.isin(self.category_ids, cats)
        return np.flatnonzero(keep)

    def validate(self, check_splits: bool = True) -> None:
        if self.n_categories < 1:
            raise FeatureFileError("n_categories must be positive")
        if self.features.ndim != 2 or self.features.shape[1] != self.shape.flat_dim:
            raise FeatureFileError(
                f"feature width {self.features.shape} does not match "
                f"shape {self.shape} (flat_dim {self.shape.flat_dim})")
        n = self.n_records
        if len(self.category_ids) != n or len(self.splits) != n:
            raise FeatureFileError("record arrays have inconsistent lengths")
        if n and (self.category_ids.min() < 0 or self.category_ids.max() >= self.n_categories):
            raise FeatureFileError("category id out of range")
        if n and self.splits.max() > 2:
            raise FeatureFileError("invalid split code")
        if not np.isfinite(self.features).all():
            raise FeatureFileError("non-finite feature value")
        if self.category_names is not None and len(self.category_names) != self.n_categories:
            raise FeatureFileError("category_names length mismatch")
        if check_splits:
            self.check_split_coverage()

    def check_split_coverage(self) -> None:
        """Require every category to appear in all three splits."""
        for code, name in enumerate(SPLIT_NAMES):
            present = np.unique(self.category_ids[self.splits == code])
            if len(present) != self.n_categories:
                missing = sorted(set(range(self.n_categories)) - set(present.tolist()))
                raise FeatureFileError(
                    f"category {missing[0]} has an empty {name} split")

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact equality, used by round-trip tests."""
        return (self.shape == other.shape
                and self.n_categories == other.n_categories
                and np.array_equal(self.category_ids, other.category_ids)
                and np.array_equal(self.splits, other.splits)
                and self.features.tobytes() == other.features.tobytes()
                and self.category_names == other.category_names)


def _record_dtype(flat_dim: int) -> np.dtype:
    return np.dtype([("category_id", "<u4"), ("split", "u1"),
                     ("features", "<f4", (flat_dim,))])


def write_feature_file(dataset: Dataset, path, source_ids=None) -> None:
    """Write a dataset in the ATNF format; round-trips bit-exactly.

    ``source_ids`` (one string per record) additionally emits the
    companion manifest CSV ``<path>.manifest.csv``.
    """
    dataset.validate(check_splits=False)
    path = Path(path)
    n = dataset.n_records
    rec = np.empty(n, dtype=_record_dtype(dataset.shape.flat_dim))
    rec["category_id"] = dataset.category_ids
    rec["split"] = dataset.splits
    rec["features"] = dataset.features
    header = _HEADER.pack(MAGIC, VERSION, n, dataset.shape.height,
                          dataset.shape.width, dataset.shape.channels,
                          dataset.n_categories)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())
    if source_ids is not None:
        if len(source_ids) != n:
            raise ValueError("source_ids length does not match record count")
        with open(f"{path}.manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["record_index", "source_id"])
            for i, sid in enumerate(source_ids):
                writer.writerow([i, sid])


def read_feature_file(path, check_splits: bool = True) -> Dataset:
    """Read an ATNF file back into a :class:`Dataset`.

    ``check_splits=False`` admits files that legitimately do not cover
    every split (category-mean files, extraction dumps).
    """
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FeatureFileError(f"bad magic in {path}")
    if len(buf) < _HEADER.size:
        raise FeatureFileError(f"truncated header in {path}")
    _, version, n, height, width, channels, n_categories = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise FeatureFileError(f"unsupported version {version} in {path}")
    if min(height, width, channels) < 1 or n_categories < 1:
        raise FeatureFileError(f"invalid header dimensions in {path}")
    shape = FeatureShape(height, width, channels)
    dtype = _record_dtype(shape.flat_dim)
    expected = _HEADER.size + n * dtype.itemsize
    if len(buf) < expected:
        raise FeatureFileError(f"truncated payload in {path}")
    if len(buf) > expected:
        raise FeatureFileError(f"trailing bytes in {path}")
    rec = np.frombuffer(buf, dtype=dtype, count=n, offset=_HEADER.size)
    dataset = Dataset(
        shape=shape,
        n_categories=n_categories,
        category_ids=rec["category_id"].astype(np.int64),
        splits=rec["split"].copy(),
        features=np.ascontiguousarray(rec["features"]),
    )
    dataset.validate(check_splits=check_splits)
    return dataset


def read_manifest(path) -> list[str]:
    """Read the companion ``<path>.manifest.csv`` written beside a feature file."""
    with open(f"{path}.manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [row["source_id"] for row in rows]


@dataclass
class SyntheticConfig:
    """Desk-scale stand-in for a cached-feature dump of a real backbone.

    Prototypes blend one shared direction with per-category directions;
    the blend weight is drawn per category group, which spreads pairwise
    cosine similarities over a wide range.  Per-category prototype radii
    (signal strength relative to the fixed-scale noise) and per-category
    noise scales both control class overlap and therefore difficulty,
    independently of the similarity structure.
    """

    n_categories: int = 64
    height: int = 1
    width: int = 1
    channels: int = 64
    train_per_category: int = 200
    val_per_category: int = 50
    test_per_category: int = 50
    n_prototype_groups: int = 8
    blend_min: float = 0.10
    blend_max: float = 0.97
    noise_min: float = 1.0
    noise_max: float = 1.0
    radius_min: float = 1.2
    radius_max: float = 3.5
    own_active_dims: int = 8

    def __post_init__(self):
        for name in ("n_categories", "height", "width", "channels",
                     "train_per_category", "val_per_category",
                     "test_per_category", "n_prototype_groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.blend_min <= self.blend_max < 1.0:
            raise ValueError("blend weights must satisfy 0 <= min <= max < 1")
        if not 0.0 <= self.noise_min <= self.noise_max:
            raise ValueError("noise scales must satisfy 0 <= min <= max")
        if not 0.0 < self.radius_min <= self.radius_max:
            raise ValueError("prototype radii must satisfy 0 < min <= max")
        if self.n_prototype_groups > self.n_categories:
            raise ValueError("more prototype groups than categories")
        if not 1 <= self.own_active_dims <= self.height * self.width * self.channels:
            raise ValueError("own_active_dims must lie in [1, flat_dim]")

    @property
    def shape(self) -> FeatureShape:
        return FeatureShape(self.height, self.width, self.channels)


def generate_synthetic(config: SyntheticConfig, seed: int) -> Dataset:
    """Deterministically generate a synthetic dataset around category prototypes."""
    rng = np.random.default_rng(seed)
    k = config.n_categories
    d = config.shape.flat_dim

    shared = rng.standard_normal(d)
    shared /= np.linalg.norm(shared)

    # Blend levels cover [blend_min, blend_max] evenly; assignment of
    # level to group is drawn so group index carries no meaning.
    levels = np.linspace(config.blend_min, config.blend_max, config.n_prototype_groups)
    levels = levels[rng.permutation(config.n_prototype_groups)]
    groups = np.arange(k) * config.n_prototype_groups // k
    alphas = levels[groups]

    prototypes = np.empty((k, d))
    for c in range(k):
        # Sparse per-category direction: a few active dims per category
        # give the attention mask dimensions worth reweighting.
        support = rng.choice(d, size=config.own_active_dims, replace=False)
        own = np.zeros(d)
        own[support] = rng.standard_normal(config.own_active_dims)
        own /= np.linalg.norm(own)
        a = alphas[c]
        combo = a * shared + np.sqrt(1.0 - a * a) * own
        prototypes[c] = combo / np.linalg.norm(combo)

    radii = rng.uniform(config.radius_min, config.radius_max, k)
    prototypes *= radii[:, None]
    sigmas = rng.uniform(config.noise_min, config.noise_max, k)

    counts = (config.train_per_category, config.val_per_category,
              config.test_per_category)
    n_total = k * sum(counts)
    features = np.empty((n_total, d), dtype=np.float32)
    category_ids = np.empty(n_total, dtype=np.int64)
    splits = np.empty(n_total, dtype=np.uint8)

    row = 0
    for c in range(k):
        for split_code, count in enumerate(counts):
            block = prototypes[c] + sigmas[c] * rng.standard_normal((count, d))
            features[row:row + count] = block.astype(np.float32)
            category_ids[row:row + count] = c
            splits[row:row + count] = split_code
            row += count

    names = [f"cat_{c:03d}" for c in range(k)]
    dataset = Dataset(config.shape, k, category_ids, splits, features,
                      category_names=names)
    dataset.validate(check_splits=True)
    return dataset
