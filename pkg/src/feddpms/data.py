"""Datasets, Dirichlet non-IID partitioning, class profiles and IDX ingestion."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Immutable labelled sample set.

    ``synthetic`` flags samples that were decoded from shared latent means;
    statistics over real data must exclude them.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    synthetic: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if y.shape != (x.shape[0],):
            raise ValueError("one label per sample required")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        syn = np.zeros(len(y), dtype=bool) if self.synthetic is None else np.asarray(self.synthetic, dtype=bool)
        if syn.shape != y.shape:
            raise ValueError("synthetic flag length mismatch")
        for a in (x, y, syn):
            a.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "synthetic", syn)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    @property
    def real(self) -> "Dataset":
        if not self.synthetic.any():
            return self
        keep = ~self.synthetic
        return Dataset(self.x[keep], self.y[keep], self.num_classes)

    @property
    def num_synthetic(self) -> int:
        return int(self.synthetic.sum())

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.synthetic[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class PartitionSpec:
    clients: int
    beta: float
    seed: int = 0

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


@dataclass(frozen=True)
class ClassProfile:
    scarce: tuple[int, ...]
    abundant: tuple[int, ...]
    degenerate: bool = False


def dirichlet_partition(src: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``src`` across clients, class by class, with ``Dir(beta * 1_K)`` shares."""
    if len(src) == 0:
        raise ValueError("cannot partition an empty dataset")
    parts = partition_indices(src.y, src.num_classes, spec)
    return [src.subset(idx) for idx in parts]


def partition_indices(y: np.ndarray, num_classes: int, spec: PartitionSpec) -> list[np.ndarray]:
    rng = np.random.default_rng(_partition_seed(spec))
    buckets: list[list[np.ndarray]] = [[] for _ in range(spec.clients)]
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        p = rng.dirichlet(np.full(spec.clients, spec.beta))
        cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
        for k, chunk in enumerate(np.split(idx, cuts)):
            buckets[k].append(chunk)
    return [np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=int) for b in buckets]


def _partition_seed(spec: PartitionSpec) -> list[int]:
    # depends on (seed, beta) only, so every scheme sees the same split
    beta_bits = struct.unpack("<Q", struct.pack("<d", float(spec.beta)))[0]
    return [spec.seed, spec.clients, beta_bits & 0xFFFFFFFF, beta_bits >> 32]


def partition_hash(parts: list[Dataset]) -> str:
    h = hashlib.sha256()
    for d in parts:
        h.update(d.digest().encode())
    return h.hexdigest()[:16]


def class_profile(d: Dataset, n: int) -> ClassProfile:
    """The ``n`` scarcest classes (ascending count) and ``n`` most abundant (descending).

    Ties go to the lower class index.
    """
    if n < 1 or n > d.num_classes:
        raise ValueError(f"n must lie in [1, {d.num_classes}]")
    counts = d.class_counts
    order = np.arange(d.num_classes)
    scarce = tuple(int(c) for c in sorted(order, key=lambda c: (counts[c], c))[:n])
    abundant = tuple(int(c) for c in sorted(order, key=lambda c: (-counts[c], c))[:n])
    return ClassProfile(scarce, abundant, degenerate=int((counts > 0).sum()) < 2 * n)


def negotiate_n(datasets: list[Dataset], threshold: float = 0.5) -> int:
    """Server-side choice of ``n`` as the minimum over clients of their scarce-class count.

    A client reports how many classes hold fewer than ``threshold`` times its
    mean per-class count.
    """
    reports = []
    for d in datasets:
        counts = d.class_counts
        reports.append(max(1, int((counts < threshold * counts.mean()).sum())))
    return min(reports)


def merge_synthetic(local: Dataset, synth: Dataset) -> Dataset:
    if len(synth) == 0:
        return local
    if synth.num_classes != local.num_classes:
        raise ValueError("class-count mismatch between local and synthetic data")
    if len(local) and synth.dim != local.dim:
        raise ValueError("feature shape mismatch between local and synthetic data")
    return Dataset(
        np.concatenate([local.x, synth.x]),
        np.concatenate([local.y, synth.y]),
        local.num_classes,
        np.concatenate([local.synthetic, np.ones(len(synth), dtype=bool)]),
    )


def sample_round_subset(merged: Dataset, target: int, rng: np.random.Generator) -> Dataset:
    """Uniform sample of ``target`` points without replacement, in random order."""
    if target > len(merged):
        raise ValueError(f"target {target} exceeds dataset size {len(merged)}")
    return merged.subset(rng.permutation(len(merged))[:target])


def make_synthetic_source(classes: int, per_class: int, spread: float, seed: int,
                          dim: int = 16, modes: int = 1, mode_radius: float = 0.0) -> Dataset:
    """Balanced labelled Gaussian clusters inside the unit cube.

    Each class has a centre drawn uniformly from ``[0.25, 0.75]^dim``.  With
    ``modes > 1`` the class is a mixture of sub-clusters whose centroids sit
    about ``mode_radius`` away from the centre in random directions.  A sample
    picks one of its class's centroids uniformly, adds isotropic noise of std
    ``spread`` and is clipped to ``[0, 1]``.  Unimodal classes are well
    separated when the smallest centroid distance is about four times
    ``spread`` or more (see ``centroid_separation``).
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class <= 0 or dim <= 0 or modes <= 0:
        raise ValueError("per_class, dim and modes must be positive")
    if spread < 0 or mode_radius < 0:
        raise ValueError("spread and mode_radius must be >= 0")
    rng = np.random.default_rng([seed, 7])
    centroids = _centroids(classes, dim, seed, modes, mode_radius)
    y = np.repeat(np.arange(classes), per_class)
    mode = rng.integers(0, modes, size=len(y)) if modes > 1 else np.zeros(len(y), dtype=int)
    x = centroids[y, mode] + spread * rng.standard_normal((len(y), dim))
    return Dataset(np.clip(x, 0.0, 1.0), y, classes)


def _centroids(classes: int, dim: int, seed: int, modes: int = 1, mode_radius: float = 0.0) -> np.ndarray:
    rng = np.random.default_rng([seed, 3])
    centres = rng.uniform(0.25, 0.75, size=(classes, 1, dim))
    if modes == 1:
        return centres
    offsets = rng.standard_normal((classes, modes, dim))
    offsets *= mode_radius / np.linalg.norm(offsets, axis=2, keepdims=True)
    return centres + offsets


def centroid_separation(classes: int, dim: int, seed: int, modes: int = 1, mode_radius: float = 0.0) -> float:
    """Smallest distance between centroids of different classes."""
    c = _centroids(classes, dim, seed, modes, mode_radius)
    flat = c.reshape(-1, dim)
    label = np.repeat(np.arange(classes), modes)
    d = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1))
    return float(d[label[:, None] != label[None, :]].min())


def train_test_split(d: Dataset, test_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``test_per_class`` samples of every class."""
    rng = np.random.default_rng([seed, 11])
    test_idx = []
    for c in range(d.num_classes):
        idx = np.flatnonzero(d.y == c)
        if len(idx) < test_per_class:
            raise ValueError(f"class {c} has fewer than {test_per_class} samples")
        test_idx.append(rng.choice(idx, test_per_class, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(d), dtype=bool)
    mask[test_idx] = False
    return d.subset(np.flatnonzero(mask)), d.subset(test_idx)


# -- IDX -------------------------------------------------------------------------

def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise IdxFormatError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are flattened and scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())
