"""
Population-based gradient encoding.

A client turns its local update theta -> theta' into one fitness value per
population member and partition: the negated squared distance between theta'
and the perturbed model theta + sigma*eps_i, restricted to that partition. Any
node holding theta and the shared seed turns (aggregated) fitness back into an
update, theta[k] += alpha/(N*sigma) * sum_i F[i, k] * eps_i[k].
"""

from dataclasses import dataclass
from typing import Optional, Protocol, Tuple

import numpy as np

from evofed.detrng import PerturbationSet, iter_pairs
from evofed.logger import get_logger
from evofed.nn_core import DimensionMismatchError, ModelParams

logger = get_logger("evofed")


class FitnessValues(Protocol):
    values: np.ndarray


@dataclass(frozen=True)
class PartitionLayout:
    """K contiguous, balanced ranges tiling the flat parameter vector."""

    boundaries: Tuple[int, ...]

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"partition boundaries must start at 0 and increase strictly, got {b}")

    @property
    def num_partitions(self) -> int:
        return len(self.boundaries) - 1

    @property
    def total(self) -> int:
        return self.boundaries[-1]

    @property
    def starts(self) -> np.ndarray:
        return np.asarray(self.boundaries[:-1], dtype=np.int64)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(np.asarray(self.boundaries, dtype=np.int64))

    def part(self, k: int) -> slice:
        return slice(self.boundaries[k], self.boundaries[k + 1])


def make_layout(total: int, num_partitions: int) -> PartitionLayout:
    """Splits ``total`` coordinates into K ranges whose sizes differ by at most one (larger first)."""
    if not 1 <= num_partitions <= total:
        raise ValueError(f"number of partitions must lie in [1, {total}], got {num_partitions}")
    base, extra = divmod(total, num_partitions)
    sizes = [base + 1 if k < extra else base for k in range(num_partitions)]
    return PartitionLayout(tuple(int(x) for x in np.concatenate([[0], np.cumsum(sizes)])))


@dataclass(frozen=True, eq=False)
class FitnessMatrix:
    """One client's N x K fitness values for round ``round_index``, weighted by ``weight`` samples."""

    round_index: int
    values: np.ndarray
    weight: int = 1

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionMismatchError(
                f"fitness must be an N x K matrix, got shape {values.shape}"
            )
        if self.weight < 1:
            raise ValueError(f"fitness weight must be at least 1, got {self.weight}")
        object.__setattr__(self, "values", values)

    @property
    def population(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_partitions(self) -> int:
        return int(self.values.shape[1])


def _check_dims(theta: ModelParams, pset: PerturbationSet, layout: PartitionLayout):
    if pset.dim != theta.arch.num_params:
        raise DimensionMismatchError(
            f"perturbations have dimension {pset.dim}, model has {theta.arch.num_params} parameters"
        )
    if layout.total != theta.arch.num_params:
        raise DimensionMismatchError(
            f"layout covers {layout.total} coordinates, model has {theta.arch.num_params} parameters"
        )


def encode(
    theta: ModelParams,
    theta_prime: ModelParams,
    pset: PerturbationSet,
    layout: PartitionLayout,
    weight: int = 1,
    round_index: int = 0,
) -> FitnessMatrix:
    """values[i, k] = -|| theta'[k] - (theta[k] + sigma * eps_i[k]) ||^2"""
    if theta.arch != theta_prime.arch:
        raise DimensionMismatchError("theta and theta' have different architectures")
    _check_dims(theta, pset, layout)
    residual = theta_prime.values - theta.values
    starts = layout.starts
    values = np.empty((pset.population, layout.num_partitions))
    for m, eps in iter_pairs(pset):
        step = pset.sigma * eps
        values[2 * m] = -np.add.reduceat(np.square(residual - step), starts)
        values[2 * m + 1] = -np.add.reduceat(np.square(residual + step), starts)
    return FitnessMatrix(round_index, values, weight)


def decode_update(
    fitness: FitnessValues, pset: PerturbationSet, layout: PartitionLayout, alpha: float
) -> np.ndarray:
    """
    The update alpha/(N*sigma) * sum_i F[i, k] * eps_i[k] for every partition, summed
    pair by pair as (F[2m] - F[2m+1]) * eps_2m in a fixed order.
    """
    values = np.asarray(fitness.values, dtype=np.float64)
    if values.shape != (pset.population, layout.num_partitions):
        raise DimensionMismatchError(
            f"fitness has shape {values.shape}, expected ({pset.population}, {layout.num_partitions})"
        )
    if layout.total != pset.dim:
        raise DimensionMismatchError(
            f"layout covers {layout.total} coordinates, perturbations have {pset.dim}"
        )
    pair_diff = values[0::2] - values[1::2]
    sizes = layout.sizes
    acc = np.zeros(pset.dim)
    for m, eps in iter_pairs(pset):
        acc += np.repeat(pair_diff[m], sizes) * eps
    return (alpha / (pset.population * pset.sigma)) * acc


def decode(
    theta: ModelParams,
    fitness: FitnessValues,
    pset: PerturbationSet,
    layout: PartitionLayout,
    alpha: float,
) -> ModelParams:
    """theta_next[k] = theta[k] + alpha/(N*sigma) * sum_i F[i, k] * eps_i[k]"""
    _check_dims(theta, pset, layout)
    return theta.with_values(theta.values + decode_update(fitness, pset, layout, alpha))


def decode_with_momentum(
    theta: ModelParams,
    fitness: FitnessValues,
    pset: PerturbationSet,
    layout: PartitionLayout,
    alpha: float,
    velocity: Optional[np.ndarray],
    momentum: float,
) -> Tuple[ModelParams, np.ndarray]:
    """Momentum on the decoded update; returns the new model and the new velocity."""
    _check_dims(theta, pset, layout)
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    update = decode_update(fitness, pset, layout, alpha)
    if velocity is None:
        velocity = np.zeros_like(update)
    velocity = momentum * velocity + update
    return theta.with_values(theta.values + velocity), velocity


def reconstruction_quality(
    theta: ModelParams,
    theta_prime: ModelParams,
    pset: PerturbationSet,
    layout: PartitionLayout,
    alpha: float,
) -> Tuple[float, float]:
    """
    How well the encode/decode round trip reproduces the local update: the cosine
    between the decoded step and theta' - theta, and the ratio of the decoded step's
    norm to ||2*alpha*(theta - theta')||.
    """
    delta = theta.values - theta_prime.values
    delta_norm = float(np.linalg.norm(delta))
    if delta_norm == 0.0:
        raise ValueError("theta' equals theta, the update direction is undefined")
    step = decode_update(encode(theta, theta_prime, pset, layout), pset, layout, alpha)
    step_norm = float(np.linalg.norm(step))
    cosine = float(np.dot(step, -delta) / (step_norm * delta_norm)) if step_norm else 0.0
    scale = 2.0 * abs(alpha) * delta_norm
    gain = step_norm / scale if scale else float("nan")
    return float(np.clip(cosine, -1.0, 1.0)), gain
