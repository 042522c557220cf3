import gzip
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from evofed.logger import get_logger

logger = get_logger("evofed")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    A classification dataset: ``inputs`` is an n x d matrix of finite features,
    ``labels`` holds n integers in ``[0, num_classes)``.
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be a matrix, got shape {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True, eq=False)
class ShardPlan:
    """Assignment of every sample index of a dataset to exactly one of ``num_shards`` clients."""

    num_shards: int
    assignment: np.ndarray
    classes_per_client: int

    def indices(self, shard: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == shard)

    def shards(self, ds: Dataset) -> List[Dataset]:
        return [ds.subset(self.indices(j)) for j in range(self.num_shards)]


def _scale_unit(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def synth_blobs(seed: int, n: int, d: int, num_classes: int, spread: float) -> Dataset:
    """
    Draws ``num_classes`` Gaussian clusters with seeded, well separated centers in the
    unit cube, assigns labels round-robin (so class counts differ by at most one),
    and scales every feature to [0, 1].
    """
    if num_classes < 1 or d < 1:
        raise ValueError("need at least one class and one feature")
    if n < num_classes:
        raise ValueError(f"n={n} must be at least the number of classes {num_classes}")
    if spread < 0:
        raise ValueError(f"spread must be non-negative, got {spread}")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xB10B5])))
    min_separation = 0.5 * num_classes ** (-1.0 / d)
    centers = rng.uniform(0.0, 1.0, size=(num_classes, d))
    for _ in range(100):
        gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
        gaps[np.diag_indices(num_classes)] = np.inf
        if gaps.min() >= min_separation:
            break
        centers = rng.uniform(0.0, 1.0, size=(num_classes, d))

    labels = rng.permutation(np.arange(n) % num_classes)
    inputs = centers[labels] + spread * rng.standard_normal((n, d))
    return Dataset(_scale_unit(inputs), labels.astype(np.int64), num_classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5B117])))
    order = rng.permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def _read_idx(path: Union[str, Path]) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, ndims: int, path) -> np.ndarray:
    header_len = 4 + 4 * ndims
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: file ends inside the IDX header")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise BadMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndims)]
    expected = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    center: bool = False,
    num_classes: Optional[int] = None,
) -> Dataset:
    """
    Loads an MNIST-style image/label pair in the IDX format (big-endian dimensions,
    optionally gzip-compressed). Pixels are scaled to [0, 1]; with ``center`` each
    feature is additionally shifted to zero mean. Without ``num_classes`` the class
    count is one more than the largest label.
    """
    images = _parse_idx(_read_idx(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_idx(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if center:
        inputs = inputs - inputs.mean(axis=0)
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    logger.info(
        f"Loaded {inputs.shape[0]} samples with {inputs.shape[1]} features from {images_path}"
    )
    return Dataset(inputs, labels, num_classes)


def noniid_split(ds: Dataset, num_clients: int, classes_per_client: int, seed: int) -> ShardPlan:
    """
    Deals classes round-robin (in seeded order) so each client owns
    ``classes_per_client`` distinct labels, then splits the samples of each class
    evenly among its owners. Classes no client was dealt (when M*c < C) are handed
    out round-robin on top so that the shards still cover the dataset.
    """
    num_classes = ds.num_classes
    if num_clients < 1:
        raise ValueError(f"need at least one client, got {num_clients}")
    if classes_per_client < 1 or classes_per_client > num_classes:
        raise ValueError(
            f"cannot give {classes_per_client} classes to a client when there are only {num_classes}"
        )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5A4D])))
    class_order = rng.permutation(num_classes)

    owners: List[List[int]] = [[] for _ in range(num_classes)]
    slot = 0
    for client in range(num_clients):
        for _ in range(classes_per_client):
            owners[int(class_order[slot % num_classes])].append(client)
            slot += 1
    uncovered = [int(c) for c in class_order if not owners[int(c)]]
    if uncovered:
        logger.warning(
            f"{num_clients} clients x {classes_per_client} classes do not cover all {num_classes} classes, assigning {len(uncovered)} extra"
        )
        for i, c in enumerate(uncovered):
            owners[c].append(i % num_clients)

    assignment = np.empty(len(ds), dtype=np.int64)
    for c in range(num_classes):
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(members.size)]
        for owner, part in zip(owners[c], np.array_split(members, len(owners[c]))):
            assignment[part] = owner
    return ShardPlan(num_clients, assignment, classes_per_client)
