"""
Seed-synchronized perturbation populations.

Every perturbation is addressed by (round seed, pair index, coordinate block) and
drawn from its own Philox stream, so any node can regenerate any slice of any
member without generating the members before it. Members come in mirrored pairs:
member 2m+1 is the exact negation of member 2m.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Tuple

import numpy as np

from evofed.logger import get_logger

logger = get_logger("evofed")

MASK_64b = 0xFFFFFFFFFFFFFFFF
DEFAULT_BLOCK_SIZE = 4096
SCHEMES = ("mirrored",)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK_64b
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK_64b
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK_64b
    return x ^ (x >> 31)


@dataclass(frozen=True)
class SeedSchedule:
    """The shared base seed s from which every round's population seed is derived."""

    base_seed: int

    def derive(self, t: int) -> int:
        return derive_round_seed(self, t)

    def stream(self, *words: int) -> np.random.Generator:
        """An auxiliary generator keyed by the base seed and ``words`` (client choice, minibatches)."""
        seq = np.random.SeedSequence([self.base_seed & MASK_64b, *words])
        return np.random.Generator(np.random.Philox(seq))


def derive_round_seed(schedule: SeedSchedule, t: int) -> int:
    """Stateless 64-bit mix of the base seed and the round index."""
    if t < 0:
        raise ValueError(f"round index must be non-negative, got {t}")
    return _splitmix64(_splitmix64(schedule.base_seed & MASK_64b) ^ (t & MASK_64b))


@dataclass(frozen=True)
class PerturbationSet:
    """
    Generative description of a population of ``population`` unit-variance
    perturbations of dimension ``dim``. ``sigma`` travels with the set but is applied
    by the codec, never here. ``streaming`` only selects how members are produced
    (on demand or from one cached matrix); both modes yield identical bits.
    """

    round_seed: int
    population: int
    dim: int
    sigma: float
    scheme: str = "mirrored"
    block_size: int = DEFAULT_BLOCK_SIZE
    streaming: bool = False

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ValueError(f"mirrored sampling needs an even population, got {self.population}")
        if self.dim < 1:
            raise ValueError(f"dimension must be positive, got {self.dim}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown sampling scheme '{self.scheme}'")
        if self.block_size < 1:
            raise ValueError("block size must be positive")

    @property
    def num_pairs(self) -> int:
        return self.population // 2

    def key(self) -> Tuple[int, int, int, int]:
        return (self.round_seed, self.population, self.dim, self.block_size)


def _pair_block(round_seed: int, pair: int, block: int, length: int) -> np.ndarray:
    seq = np.random.SeedSequence([round_seed, pair, block])
    return np.random.Generator(np.random.Philox(seq)).standard_normal(length)


def _pair_slice(pset: PerturbationSet, pair: int, start: int, stop: int) -> np.ndarray:
    bs = pset.block_size
    first, last = start // bs, (stop - 1) // bs
    parts = []
    for block in range(first, last + 1):
        b_start = block * bs
        length = min(bs, pset.dim - b_start)
        values = _pair_block(pset.round_seed, pair, block, length)
        lo = max(start, b_start) - b_start
        hi = min(stop, b_start + length) - b_start
        parts.append(values[lo:hi])
    return parts[0] if len(parts) == 1 else np.concatenate(parts)


@lru_cache(maxsize=4)
def _pair_matrix(key: Tuple[int, int, int, int]) -> np.ndarray:
    round_seed, population, dim, block_size = key
    pset = PerturbationSet(round_seed, population, dim, 1.0, block_size=block_size, streaming=True)
    matrix = np.stack([_pair_slice(pset, m, 0, dim) for m in range(pset.num_pairs)])
    matrix.setflags(write=False)
    return matrix


def _check_index(pset: PerturbationSet, i: int):
    if not 0 <= i < pset.population:
        raise IndexError(f"member index {i} out of range for a population of {pset.population}")


def perturbation_slice(pset: PerturbationSet, i: int, start: int, stop: int) -> np.ndarray:
    """Coordinates [start, stop) of member ``i``, generating only the blocks that overlap."""
    _check_index(pset, i)
    if not 0 <= start < stop <= pset.dim:
        raise IndexError(f"slice [{start}, {stop}) out of range for dimension {pset.dim}")
    if pset.streaming:
        base = _pair_slice(pset, i // 2, start, stop)
    else:
        base = np.array(_pair_matrix(pset.key())[i // 2, start:stop])
    return -base if i % 2 else base


def perturbation(pset: PerturbationSet, i: int) -> np.ndarray:
    """Member ``i`` as a unit-variance vector of length ``pset.dim``."""
    return perturbation_slice(pset, i, 0, pset.dim)


def iter_pairs(pset: PerturbationSet) -> Iterator[Tuple[int, np.ndarray]]:
    """Yields (m, eps_2m) for every mirrored pair; eps_2m+1 is -eps_2m."""
    if pset.streaming:
        for m in range(pset.num_pairs):
            yield m, _pair_slice(pset, m, 0, pset.dim)
    else:
        matrix = _pair_matrix(pset.key())
        for m in range(pset.num_pairs):
            yield m, matrix[m]


def materialize(pset: PerturbationSet) -> np.ndarray:
    """All N members as an N x d matrix (rows in member order)."""
    out = np.empty((pset.population, pset.dim))
    for m, eps in iter_pairs(pset):
        out[2 * m] = eps
        out[2 * m + 1] = -eps
    return out


def moment_check(pset: PerturbationSet) -> Tuple[np.ndarray, float, np.ndarray]:
    """
    Empirical first, second and third moments per coordinate. Mirrored partners are
    summed first, which makes the odd moments exactly zero; ``m2max`` is the largest
    per-coordinate second moment (the empirical G^2).
    """
    m1 = np.zeros(pset.dim)
    m2 = np.zeros(pset.dim)
    m3 = np.zeros(pset.dim)
    for _, eps in iter_pairs(pset):
        neg = -eps
        m1 += eps + neg
        m2 += eps * eps + neg * neg
        m3 += eps * eps * eps + neg * neg * neg
    n = pset.population
    return m1 / n, float((m2 / n).max()), m3 / n
