"""Datasets, non-IID partitioners, synthetic defect generator, PGM folder loader.

Everything here is deterministic given its seed, and partition assignments
always refer to row indices of the canonical dataset ordering. Image folders
follow the layout ``<root>/<class_name>/*.pgm`` with 8-bit binary PGM (P5,
maxval 255); class labels are assigned by sorted subdirectory name.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    features: np.ndarray  # (n, input_dim) float64
    labels: np.ndarray  # (n,) int64 class indices
    num_classes: int
    source: str = "synthetic"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ValueError("features must be (n, d) with one label per row")
        if len(self.labels) < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.source)


@dataclass
class SyntheticSpec:
    """Gaussian blobs: seeded class means on a hypersphere plus isotropic noise."""

    num_classes: int
    input_dim: int
    noise_sigma: float
    samples_per_class: int
    separation: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.num_classes < 2 or self.samples_per_class < 1 or self.input_dim < 1:
            raise ValueError("invalid synthetic spec")


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """Per-class mean vectors: unit directions scaled by the separation radius."""
    rng = np.random.default_rng(spec.seed)
    raw = rng.standard_normal((spec.num_classes, spec.input_dim))
    means = spec.separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    for a in range(spec.num_classes):
        for b in range(a + 1, spec.num_classes):
            if np.array_equal(means[a], means[b]):
                raise ValueError("degenerate synthetic spec: coincident class means")
    return means


def synth_generate(spec: SyntheticSpec) -> Dataset:
    """Samples per class: mean + N(0, sigma^2) noise, grouped by class."""
    means = class_means(spec)
    rng = np.random.default_rng(spec.seed + 1)
    features = np.empty((spec.num_classes * spec.samples_per_class, spec.input_dim))
    labels = np.empty(len(features), dtype=np.int64)
    for c in range(spec.num_classes):
        start = c * spec.samples_per_class
        noise = rng.standard_normal((spec.samples_per_class, spec.input_dim))
        features[start : start + spec.samples_per_class] = means[c] + spec.noise_sigma * noise
        labels[start : start + spec.samples_per_class] = c
    return Dataset(features, labels, spec.num_classes, source="synthetic")


def _read_pgm(path: str) -> np.ndarray:
    """Parse a binary (P5) 8-bit PGM into a (height, width) uint8 array."""
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError as exc:
        raise ValueError(f"unreadable file {path}: {exc}") from exc

    if not data.startswith(b"P5"):
        raise ValueError(f"{path} is not a binary PGM (P5) file")

    # Header tokens (width, height, maxval) with '#' comments allowed.
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval

    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}, expected 255")
    pixels = data[pos : pos + width * height]
    if len(pixels) != width * height:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def average_pool(image: np.ndarray, side: int) -> np.ndarray:
    """Pool an image to side x side cells; cell (i, j) is the mean of its block."""
    height, width = image.shape
    if height < side or width < side:
        raise ValueError(f"image {image.shape} smaller than pooling grid {side}x{side}")
    row_edges = [i * height // side for i in range(side + 1)]
    col_edges = [j * width // side for j in range(side + 1)]
    pooled = np.empty((side, side))
    for i in range(side):
        for j in range(side):
            block = image[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            pooled[i, j] = block.mean(dtype=np.float64)
    return pooled


def load_image_folder(path: str, side: int) -> Dataset:
    """Load class-named PGM subfolders, pooled to side x side and scaled to [0, 1]."""
    class_dirs = sorted(
        d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d))
    )
    if not class_dirs:
        raise ValueError(f"no class subdirectories under {path}")
    rows, labels = [], []
    for label, name in enumerate(class_dirs):
        class_path = os.path.join(path, name)
        files = sorted(f for f in os.listdir(class_path) if f.endswith(".pgm"))
        if not files:
            raise ValueError(f"empty class directory {class_path}")
        for filename in files:
            image = _read_pgm(os.path.join(class_path, filename))
            rows.append(average_pool(image, side).ravel() / 255.0)
            labels.append(label)
    return Dataset(np.array(rows), np.array(labels), len(class_dirs), source="folder")


@dataclass
class PartitionSpec:
    """Per-client index lists over the canonical dataset ordering."""

    scheme: str  # "disjoint" or "dirichlet"
    param: float  # classes per client, or the Dirichlet concentration
    num_clients: int
    seed: int
    assignment: list[np.ndarray] = field(default_factory=list)


def partition_disjoint(dataset: Dataset, num_clients: int, classes_per_client: int, seed: int) -> PartitionSpec:
    """Allocate `classes_per_client` random classes to each client.

    Clients may share classes (required whenever K*c exceeds the class count);
    a shared class's samples are split evenly across its holders, remainder to
    the lowest-id holders. Classes drawn by no client are left unassigned.
    """
    if classes_per_client < 1:
        raise ValueError("classes_per_client must be >= 1")
    if classes_per_client > dataset.num_classes:
        raise ValueError(
            f"classes_per_client {classes_per_client} exceeds class count {dataset.num_classes}"
        )
    rng = np.random.default_rng(seed)
    chosen = [
        np.sort(rng.choice(dataset.num_classes, size=classes_per_client, replace=False))
        for _ in range(num_clients)
    ]
    assignment = [[] for _ in range(num_clients)]
    for cls in range(dataset.num_classes):
        holders = [k for k in range(num_clients) if cls in chosen[k]]
        if not holders:
            continue
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) < len(holders):
            raise ValueError(f"class {cls} has fewer samples than holders")
        idx = rng.permutation(idx)
        for holder, part in zip(holders, np.array_split(idx, len(holders))):
            assignment[holder].append(part)
    parts = [np.sort(np.concatenate(a)) if a else np.empty(0, dtype=np.int64) for a in assignment]
    return PartitionSpec("disjoint", float(classes_per_client), num_clients, seed, parts)


def partition_dirichlet(dataset: Dataset, num_clients: int, alpha: float, seed: int, max_attempts: int = 100) -> PartitionSpec:
    """Per class, a Dirichlet(alpha) draw splits that class across clients.

    Proportions are rounded by largest remainder so every sample is assigned.
    If any client ends up empty the whole draw is repeated (same generator,
    up to max_attempts) so that each client holds at least one sample.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        assignment = [[] for _ in range(num_clients)]
        for cls in range(dataset.num_classes):
            idx = rng.permutation(np.flatnonzero(dataset.labels == cls))
            proportions = rng.dirichlet(np.full(num_clients, alpha))
            counts = np.floor(proportions * len(idx)).astype(int)
            # Largest-remainder rounding keeps the total exactly len(idx).
            shortfall = len(idx) - counts.sum()
            remainders = proportions * len(idx) - counts
            for k in np.argsort(-remainders, kind="stable")[:shortfall]:
                counts[k] += 1
            start = 0
            for k in range(num_clients):
                assignment[k].append(idx[start : start + counts[k]])
                start += counts[k]
        parts = [np.sort(np.concatenate(a)) for a in assignment]
        if all(len(p) > 0 for p in parts):
            return PartitionSpec("dirichlet", alpha, num_clients, seed, parts)
    raise ValueError(f"could not give every client a sample in {max_attempts} attempts")


@dataclass
class ClientSplit:
    """Per-client train/test datasets plus the pooled test set."""

    train: list[Dataset]
    test: list[Dataset]
    global_test: Dataset
    train_indices: list[np.ndarray]
    test_indices: list[np.ndarray]


def subsample_train(dataset: Dataset, per_client_n: int, spec: PartitionSpec, seed: int) -> ClientSplit:
    """Pick per_client_n training rows per client; the rest of each client's
    assignment becomes its personalized test set (at least one row required).
    """
    rng = np.random.default_rng(seed)
    train_sets, test_sets, train_idx, test_idx = [], [], [], []
    for k, assigned in enumerate(spec.assignment):
        if per_client_n >= len(assigned):
            raise ValueError(
                f"insufficient samples for client {k}: {len(assigned)} assigned, "
                f"{per_client_n} requested for training plus at least 1 for test"
            )
        picked = np.sort(rng.choice(assigned, size=per_client_n, replace=False))
        rest = np.setdiff1d(assigned, picked)
        train_sets.append(dataset.take(picked))
        test_sets.append(dataset.take(rest))
        train_idx.append(picked)
        test_idx.append(rest)
    pooled = np.concatenate(test_idx)
    return ClientSplit(train_sets, test_sets, dataset.take(pooled), train_idx, test_idx)
