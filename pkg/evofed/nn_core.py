"""
Dense feedforward networks over flat parameter vectors.

Parameters are stored layer-major: for every layer first the ``in x out`` weight
matrix (row-major), then the ``out`` biases. Everything here is a pure function of
its arguments; no operation modifies the model it is given.
"""

from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from evofed.datasets import Dataset
from evofed.logger import get_logger
from evofed.utils import fingerprint

logger = get_logger("evofed")

ACTIVATIONS = ("relu", "tanh", "identity")


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DenseLayer:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    @property
    def num_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True)
class ArchSpec:
    layers: Tuple[DenseLayer, ...]
    loss: str = "softmax-cross-entropy"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an architecture needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.in_dim < 1 or layer.out_dim < 1:
                raise ValueError(f"layer {i} has non-positive dimensions")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i} has unknown activation '{layer.activation}'")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer {i} outputs {a.out_dim} values but layer {i + 1} expects {b.in_dim}"
                )
        if self.loss != "softmax-cross-entropy":
            raise ValueError(f"unsupported loss '{self.loss}'")

    @classmethod
    def mlp(
        cls, in_dim: int, hidden: Sequence[int], num_classes: int, activation: str = "relu"
    ) -> "ArchSpec":
        """Hidden layers use ``activation``; the output layer emits raw logits."""
        dims = [in_dim, *hidden, num_classes]
        layers = [
            DenseLayer(a, b, activation if i < len(dims) - 2 else "identity")
            for i, (a, b) in enumerate(zip(dims, dims[1:]))
        ]
        return cls(tuple(layers))

    @property
    def num_params(self) -> int:
        return sum(layer.num_params for layer in self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def layer_bounds(self) -> List[Tuple[int, int]]:
        """(start, stop) offsets of every layer's weights+biases in the flat vector."""
        bounds, offset = [], 0
        for layer in self.layers:
            bounds.append((offset, offset + layer.num_params))
            offset += layer.num_params
        return bounds


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: ArchSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.arch.num_params,):
            raise DimensionMismatchError(
                f"architecture has {self.arch.num_params} parameters, got vector of shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("model parameters must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, values)

    def fingerprint(self) -> str:
        return fingerprint(self.values)

    def unpack(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Views of (W, b) per layer; W has shape (in, out)."""
        params = []
        for layer, (start, _) in zip(self.arch.layers, self.arch.layer_bounds()):
            w_end = start + layer.in_dim * layer.out_dim
            w = self.values[start:w_end].reshape(layer.in_dim, layer.out_dim)
            b = self.values[w_end : w_end + layer.out_dim]
            params.append((w, b))
        return params


@dataclass(frozen=True)
class OptimizerCfg:
    learning_rate: float = 0.0873
    momentum: float = 0.9074
    weight_decay: float = 0.0
    local_steps: int = 10
    batch_size: int = 256

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.local_steps < 1 or self.batch_size < 1:
            raise ValueError("local steps and batch size must be at least 1")

    def samples_consumed(self, shard_size: int) -> int:
        """Samples seen in one round of local training, the aggregation weight b_j."""
        return min(self.local_steps * self.batch_size, shard_size)


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionMismatchError(
                f"batch has inputs of shape {self.inputs.shape} and {self.labels.shape[0]} labels"
            )

    @classmethod
    def of(cls, ds: Dataset, indices: Optional[np.ndarray] = None) -> "Batch":
        if indices is None:
            return cls(ds.inputs, ds.labels)
        return cls(ds.inputs[indices], ds.labels[indices])


def init_model(arch: ArchSpec, seed: int) -> ModelParams:
    """Weights ~ N(0, 1/in_dim), biases zero; bit-identical for equal (arch, seed)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x1A17])))
    values = np.zeros(arch.num_params)
    for layer, (start, _) in zip(arch.layers, arch.layer_bounds()):
        n_w = layer.in_dim * layer.out_dim
        values[start : start + n_w] = rng.standard_normal(n_w) / np.sqrt(layer.in_dim)
    return ModelParams(arch, values)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _check_batch(model: ModelParams, batch: Batch):
    if batch.inputs.shape[1] != model.arch.in_dim:
        raise DimensionMismatchError(
            f"model expects {model.arch.in_dim} input features, batch has {batch.inputs.shape[1]}"
        )
    labels = batch.labels
    if labels.size and (labels.min() < 0 or labels.max() >= model.arch.num_classes):
        raise DimensionMismatchError(f"labels must lie in [0, {model.arch.num_classes})")


def _forward(model: ModelParams, inputs: np.ndarray):
    activations, pre_activations = [inputs], []
    a = inputs
    for layer, (w, b) in zip(model.arch.layers, model.unpack()):
        z = a @ w + b
        a = _activate(z, layer.activation)
        pre_activations.append(z)
        activations.append(a)
    return activations, pre_activations


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(model: ModelParams, batch: Batch) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient w.r.t. the flat vector."""
    _check_batch(model, batch)
    n = batch.inputs.shape[0]
    if n == 0:
        raise ValueError("cannot compute a loss on an empty batch")
    activations, pre_activations = _forward(model, batch.inputs)
    log_probs = _log_softmax(activations[-1])
    rows = np.arange(n)
    loss = float(-log_probs[rows, batch.labels].mean())

    delta = np.exp(log_probs)
    delta[rows, batch.labels] -= 1.0
    delta /= n

    grad = np.empty(model.arch.num_params)
    params = model.unpack()
    bounds = model.arch.layer_bounds()
    for i in reversed(range(len(model.arch.layers))):
        layer = model.arch.layers[i]
        delta = delta * _activation_grad(pre_activations[i], activations[i + 1], layer.activation)
        start, stop = bounds[i]
        w_end = start + layer.in_dim * layer.out_dim
        grad[start:w_end] = (activations[i].T @ delta).ravel()
        grad[w_end:stop] = delta.sum(axis=0)
        delta = delta @ params[i][0].T
    return loss, grad


def predict_logits(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    return _forward(model, inputs)[0][-1]


def batch_schedule(shard_size: int, cfg: OptimizerCfg, seed: int) -> Iterator[np.ndarray]:
    """
    Yields ``cfg.local_steps`` index arrays: successive minibatches of a seeded
    permutation of the shard, reshuffled whenever the permutation is used up.
    """
    if shard_size < 1:
        raise ValueError("cannot train on an empty shard")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xBA7C4])))
    batch_size = min(cfg.batch_size, shard_size)
    order, cursor = rng.permutation(shard_size), 0
    for _ in range(cfg.local_steps):
        if cursor + batch_size > shard_size:
            order, cursor = rng.permutation(shard_size), 0
        yield order[cursor : cursor + batch_size]
        cursor += batch_size


def sgd_step(
    model: ModelParams,
    velocity: np.ndarray,
    batch: Batch,
    cfg: OptimizerCfg,
    learning_rate: Optional[float] = None,
) -> Tuple[ModelParams, np.ndarray]:
    """One heavy-ball step: v <- m*v - lr*(g + wd*theta); theta <- theta + v."""
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    _, grad = loss_and_grad(model, batch)
    if cfg.weight_decay:
        grad = grad + cfg.weight_decay * model.values
    velocity = cfg.momentum * velocity - lr * grad
    return model.with_values(model.values + velocity), velocity


def local_train(
    model: ModelParams,
    shard: Dataset,
    cfg: OptimizerCfg,
    seed: int,
    learning_rate: Optional[float] = None,
) -> ModelParams:
    """
    Runs ``cfg.local_steps`` SGD-with-momentum steps from ``model`` on seeded
    minibatches of ``shard`` and returns the BP target theta'. The momentum buffer
    starts at zero every call.
    """
    if len(shard) == 0:
        raise ValueError("cannot train on an empty shard")
    velocity = np.zeros(model.arch.num_params)
    for indices in batch_schedule(len(shard), cfg, seed):
        model, velocity = sgd_step(model, velocity, Batch.of(shard, indices), cfg, learning_rate)
    return model


def evaluate(model: ModelParams, testset: Dataset) -> Tuple[float, float]:
    """(accuracy, mean cross-entropy) of ``model`` on ``testset``."""
    if len(testset) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    batch = Batch.of(testset)
    _check_batch(model, batch)
    log_probs = _log_softmax(predict_logits(model, batch.inputs))
    rows = np.arange(len(testset))
    accuracy = float(np.mean(np.argmax(log_probs, axis=1) == batch.labels))
    return accuracy, float(-log_probs[rows, batch.labels].mean())
