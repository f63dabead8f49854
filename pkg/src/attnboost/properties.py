"""Task-set properties: difficulty, size, and perceptual similarity.

Difficulty of a category set is the mean val-split error rate of the
plain (identity-mask) head over its categories.  Similarity is the mean
pairwise cosine similarity of category mean representations, computed
over the train split.  By default the mean representation is the cached
feature vector spatially mean-pooled to a channel vector; an auxiliary
per-record feature file can stand in for a dedicated similarity space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .feature_store import Dataset, FeatureShape, read_feature_file, write_feature_file
from .head_model import HeadModel, predict_labels


@dataclass
class CategoryStats:
    category_id: int
    baseline_accuracy: float
    mean_representation: np.ndarray  # float64


@dataclass(frozen=True)
class TaskSet:
    categories: tuple          # sorted category ids, len >= 2
    difficulty: float
    size: int
    similarity: float

    def __post_init__(self):
        if len(self.categories) < 2:
            raise ValueError("a task set needs at least two categories")
        if self.size != len(self.categories):
            raise ValueError("size must equal the number of categories")


def _as_table(stats) -> dict[int, CategoryStats]:
    if isinstance(stats, dict):
        return stats
    return {s.category_id: s for s in stats}


def spatial_mean_pool(features: np.ndarray, shape: FeatureShape) -> np.ndarray:
    """Average a (n, flat_dim) block over spatial positions -> (n, channels)."""
    n = features.shape[0]
    return features.reshape(n, shape.height * shape.width, shape.channels).mean(axis=1)


def category_mean_representations(dataset: Dataset,
                                  similarity_dataset: Dataset | None = None) -> np.ndarray:
    """(n_categories, dim) train-split mean representations.

    With ``similarity_dataset`` given (same record count and order as
    ``dataset``), its vectors replace the pooled cached features.
    """
    if similarity_dataset is not None:
        if similarity_dataset.n_records != dataset.n_records:
            raise ValueError("similarity feature file must align record-for-record")
        source = spatial_mean_pool(
            similarity_dataset.features.astype(np.float64), similarity_dataset.shape)
    else:
        source = spatial_mean_pool(dataset.features.astype(np.float64), dataset.shape)
    means = np.empty((dataset.n_categories, source.shape[1]))
    for c in range(dataset.n_categories):
        idx = dataset.indices(split="train", categories=[c])
        if len(idx) == 0:
            raise ValueError(f"category {c} has an empty train split")
        means[c] = source[idx].mean(axis=0)
    return means


def compute_category_stats(head: HeadModel, dataset: Dataset,
                           similarity_dataset: Dataset | None = None) -> list[CategoryStats]:
    """Per-category baseline accuracy (val split) and mean representation."""
    means = category_mean_representations(dataset, similarity_dataset)
    val_idx = dataset.indices(split="val")
    preds = predict_labels(head, dataset.features[val_idx].astype(np.float64))
    truth = dataset.category_ids[val_idx]
    stats = []
    for c in range(dataset.n_categories):
        in_cat = truth == c
        if not in_cat.any():
            raise ValueError(f"category {c} has an empty val split")
        accuracy = float(np.mean(preds[in_cat] == c))
        stats.append(CategoryStats(c, accuracy, means[c]))
    return stats


def difficulty(categories, stats) -> float:
    """Mean error rate (1 - baseline accuracy) over the category set."""
    table = _as_table(stats)
    cats = sorted(set(categories))
    if not cats:
        raise ValueError("difficulty of an empty set is undefined")
    total = 0.0
    for c in cats:
        if c not in table:
            raise KeyError(f"unknown category id {c}")
        total += 1.0 - table[c].baseline_accuracy
    return total / len(cats)


def pairwise_similarity(c_i: int, c_j: int, stats) -> float:
    """Cosine similarity of two category mean representations.

    Computed in a canonical id order so the result is exactly symmetric.
    """
    table = _as_table(stats)
    lo, hi = sorted((c_i, c_j))
    r_lo, r_hi = table[lo].mean_representation, table[hi].mean_representation
    norm_lo = float(np.linalg.norm(r_lo))
    norm_hi = float(np.linalg.norm(r_hi))
    if norm_lo == 0.0 or norm_hi == 0.0:
        raise ValueError("zero-norm mean representation")
    return float(r_lo @ r_hi) / (norm_lo * norm_hi)


def set_similarity(categories, stats) -> float:
    """Mean pairwise similarity over all distinct pairs in the set."""
    cats = sorted(set(categories))
    if len(cats) < 2:
        raise ValueError("set similarity needs at least two categories")
    table = _as_table(stats)
    total = 0.0
    for a in range(len(cats)):
        for b in range(a + 1, len(cats)):
            total += pairwise_similarity(cats[a], cats[b], table)
    n_pairs = len(cats) * (len(cats) - 1) // 2
    return total / n_pairs


def size(categories) -> int:
    """Number of categories in the set."""
    return len(set(categories))


def make_task_set(categories, stats) -> TaskSet:
    cats = tuple(sorted(set(categories)))
    return TaskSet(
        categories=cats,
        difficulty=difficulty(cats, stats),
        size=len(cats),
        similarity=set_similarity(cats, stats),
    )


def similarity_matrix(stats) -> np.ndarray:
    """Dense pairwise-similarity matrix indexed by category id (diagonal 1)."""
    table = _as_table(stats)
    ids = sorted(table)
    if ids != list(range(len(ids))):
        raise ValueError("similarity_matrix expects dense category ids")
    sim = np.eye(len(ids))
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            sim[a, b] = sim[b, a] = pairwise_similarity(a, b, table)
    return sim


def write_stats_cache(stats, csv_path, means_path) -> None:
    """Persist stats as an accuracy CSV plus a means file in ATNF format."""
    ordered = sorted(stats, key=lambda s: s.category_id)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category_id", "baseline_accuracy"])
        for s in ordered:
            writer.writerow([s.category_id, repr(float(s.baseline_accuracy))])
    dim = len(ordered[0].mean_representation)
    means = Dataset(
        shape=FeatureShape(1, 1, dim),
        n_categories=len(ordered),
        category_ids=[s.category_id for s in ordered],
        splits=np.zeros(len(ordered), dtype=np.uint8),
        features=np.stack([s.mean_representation for s in ordered]).astype(np.float32),
    )
    write_feature_file(means, means_path)


def read_stats_cache(csv_path, means_path) -> list[CategoryStats]:
    means = read_feature_file(means_path, check_splits=False)
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != means.n_records:
        raise ValueError("stats CSV and means file disagree on category count")
    stats = []
    for i, row in enumerate(rows):
        cat = int(row["category_id"])
        if cat != int(means.category_ids[i]):
            raise ValueError("stats CSV and means file category order disagree")
        stats.append(CategoryStats(cat, float(row["baseline_accuracy"]),
                                   means.features[i].astype(np.float64)))
    return stats
