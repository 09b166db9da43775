"""Synthetic Gaussian-mixture datasets and non-iid Dirichlet partitioning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PartitionError


@dataclass(frozen=True)
class DataParams:
    n_per_class: int = 60
    separation: float = 4.0
    alpha: float = 0.1
    test_fraction: float = 0.3

    def validate(self, path="data"):
        if self.n_per_class < 1:
            raise ConfigError("must be >= 1", f"{path}.n_per_class")
        if self.separation < 0:
            raise ConfigError("must be >= 0", f"{path}.separation")
        if not self.alpha > 0:
            raise ConfigError("must be > 0", f"{path}.alpha")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("must lie in (0, 1)", f"{path}.test_fraction")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on row count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class Shard:
    owner: int
    indices: np.ndarray


def generate_synthetic(C: int, d: int, n_per_class: int, separation: float, seed) -> Dataset:
    """Balanced Gaussian mixture: one mean per class on a sphere of radius
    ``separation``, unit isotropic noise around it."""
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(C, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    labels = np.repeat(np.arange(C), n_per_class)
    features = means[labels] + rng.normal(size=(C * n_per_class, d))
    return Dataset(features, labels, C)


def dirichlet_partition(dataset: Dataset, num_nodes: int, alpha: float, seed) -> list[Shard]:
    """Split ``dataset`` across ``num_nodes`` owners (ids ``0..num_nodes-1``).

    Per class, node proportions come from a symmetric Dirichlet(alpha) and
    the class's shuffled samples are cut at the cumulative proportions.
    Empty shards then take one sample each from the currently largest shard.
    """
    if num_nodes < 1:
        raise PartitionError("num_nodes must be >= 1")
    if not alpha > 0:
        raise PartitionError("alpha must be > 0")
    if len(dataset) < num_nodes:
        raise PartitionError(f"{len(dataset)} samples cannot fill {num_nodes} non-empty shards")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(num_nodes)]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_nodes, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for node, part in enumerate(np.split(idx, cuts)):
            buckets[node].extend(part.tolist())
    for node in range(num_nodes):
        if not buckets[node]:
            donor = max(range(num_nodes), key=lambda k: (len(buckets[k]), -k))
            buckets[node].append(buckets[donor].pop())
    return [Shard(node, np.array(sorted(b), dtype=np.int64)) for node, b in enumerate(buckets)]


def _stratified_test_mask(labels: np.ndarray, test_fraction: float, rng) -> np.ndarray:
    mask = np.zeros(labels.shape[0], dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_test = int(np.floor(test_fraction * len(idx) + 0.5))
        mask[rng.permutation(idx)[:n_test]] = True
    return mask


def train_test_indices(labels: np.ndarray, test_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split of row indices; each class contributes
    round(fraction * count) test rows."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    mask = _stratified_test_mask(np.asarray(labels), test_fraction, np.random.default_rng(seed))
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def train_test_split(dataset: Dataset, test_fraction: float, seed) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = train_test_indices(dataset.labels, test_fraction, seed)
    return dataset.subset(train_idx), dataset.subset(test_idx)


def label_entropy(labels: np.ndarray, class_count: int) -> float:
    """Shannon entropy (nats) of the empirical label distribution."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
